use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Tag byte used by the S2CT file header.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(arg_err!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating point element type a [`Tensor`] can hold.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal into this type.
    fn lit(x: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Dense row-major array of rank 1 to 4 with finite entries.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &std::any::type_name::<T>())
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(dim_err!("rank must be 1..={MAX_RANK}, got {}", dims.len()));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(dim_err!("extent {pos} is zero in {dims:?}"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| dim_err!("element count of {dims:?} overflows"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(dim_err!(
                "buffer of {} elements does not match dims {dims:?} ({len})",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Builds a tensor from a buffer the caller guarantees is consistent.
    /// Finiteness is still checked in debug builds.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(check_dims(&dims).ok(), Some(data.len()));
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor {dims:?}"
        );
        Self { dims, data }
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims, (0..len).map(&mut f).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for builders that own the tensor. Callers must keep
    /// entries finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    /// Requires rank 2 and returns `(rows, cols)`.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [m, n] => Ok((m, n)),
            _ => Err(dim_err!("expected a matrix, got dims {:?}", self.dims)),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.data.len() / self.dims[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(dim_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(max_abs_diff(&self.data, &other.data))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.shape2()?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data.iter().map(|&v| v * s).collect();
        Self::from_parts(self.dims.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(dim_err!("add {:?} + {:?}", self.dims, other.dims));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }
}

pub(crate) fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

/// Matrix product with left-to-right accumulation over the inner extent.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {m}x{k} * {k2}x{n}"));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Divides every row by `max(‖row‖₂, eps)`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    // Written this way so NaN is rejected too.
    if !(eps > T::zero()) {
        return Err(arg_err!("eps must be positive, got {eps}"));
    }
    let (m, d) = x.shape2()?;
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(d).take(m) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        row.iter_mut().for_each(|v| *v = *v / denom);
    }
    Ok(Tensor::from_parts(vec![m, d], out))
}

// Small slice kernels shared by the scan, refine and attention modules.

/// `out = W x` for a row-major `rows × cols` matrix.
#[inline]
pub(crate) fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out += Wᵀ g` for a row-major `rows × cols` matrix.
#[inline]
pub(crate) fn matvec_t_acc<T: Scalar>(w: &[T], g: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&gv, row) in g.iter().zip(w.chunks_exact(cols)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += gv * wv;
        }
    }
}

/// `acc += g xᵀ`.
#[inline]
pub(crate) fn outer_acc<T: Scalar>(acc: &mut [T], g: &[T], x: &[T]) {
    let cols = x.len();
    for (&gv, row) in g.iter().zip(acc.chunks_exact_mut(cols)) {
        for (a, &xv) in row.iter_mut().zip(x) {
            *a += gv * xv;
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
pub(crate) fn add_assign<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.shape2().unwrap();
        let (_, n) = b.shape2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(&[2], vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::<f32>::new(&[1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::new(1);
        let x = rng.uniform_tensor::<f64>(&[3, 4], -1.0, 1.0);
        let id = Tensor::identity(3).unwrap();
        assert_eq!(matmul(&id, &x).unwrap(), x);

        let z = matmul(
            &Tensor::<f64>::zeros(&[2, 3]).unwrap(),
            &Tensor::ones(&[3, 2]).unwrap(),
        )
        .unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(2);
        let a = rng.uniform_tensor::<f64>(&[4, 3], -1.0, 1.0);
        let b = rng.uniform_tensor::<f64>(&[3, 2], -1.0, 1.0);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        assert!(max_abs_diff(got.data(), &want) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_rows_examples() {
        let x = Tensor::new(&[2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize_rows(&x, 1e-8).unwrap();
        assert_eq!(n.data(), &[0.6, 0.8, 0.0, 0.0]);
        assert!(l2_normalize_rows(&x, 0.0).is_err());
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let mut rng = Rng::new(3);
        let x = rng.uniform_tensor::<f64>(&[5, 7], -2.0, 2.0);
        let n = l2_normalize_rows(&x, 1e-8).unwrap();
        for i in 0..5 {
            let norm: f64 = n.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = Rng::new(4);
        let x = rng.uniform_tensor::<f64>(&[3, 5], -1.0, 1.0);
        assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
        assert_eq!(x.transpose().unwrap().dims(), &[5, 3]);
    }
}
