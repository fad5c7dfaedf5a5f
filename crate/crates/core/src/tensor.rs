//! Dense N-dimensional tensors and the multilinear primitives the rest of
//! the crate is written against.
//!
//! Storage is always row-major (last index fastest) and contiguous; `permute`
//! physically reorders data so every result is itself contiguous. All
//! reductions run in a fixed order, so results are bit-stable across runs.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{DttnError, Result};

/// Element dtype tag, used by checkpoints and the C API.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(DttnError::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Real scalar element: f32 for training, f64 for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }

            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
            fn byte_width() -> usize {
                std::mem::size_of::<$t>()
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(DttnError::Dim(format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(DttnError::Dim(format!(
                "shape {shape:?} holds {expect} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ONE; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset_of(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(DttnError::Index(format!(
                "index rank {} vs tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let strides = self.strides();
        let mut off = 0;
        for (k, (&i, (&e, &s))) in index
            .iter()
            .zip(self.shape.iter().zip(strides.iter()))
            .enumerate()
        {
            if i >= e {
                return Err(DttnError::Index(format!(
                    "index {i} out of range for extent {e} in mode {k}"
                )));
            }
            off += i * s;
        }
        Ok(off)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset_of(index).expect("index in range")]
    }

    pub fn at_mut(&mut self, index: &[usize]) -> &mut T {
        let off = self.offset_of(index).expect("index in range");
        &mut self.data[off]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let expect: usize = new_shape.iter().product();
        if expect != self.data.len() || new_shape.iter().any(|&e| e == 0) {
            return Err(DttnError::Dim(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                new_shape
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorder modes; the result is physically contiguous row-major.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let r = self.shape.len();
        if order.len() != r {
            return Err(DttnError::Dim(format!(
                "permutation {order:?} has wrong length for rank {r}"
            )));
        }
        let mut seen = vec![false; r];
        for &a in order {
            if a >= r || seen[a] {
                return Err(DttnError::Dim(format!(
                    "invalid permutation {order:?} for rank {r}"
                )));
            }
            seen[a] = true;
        }
        let new_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let old_strides = self.strides();
        let mut out = vec![T::ZERO; self.data.len()];
        let mut idx = vec![0usize; r];
        for slot in out.iter_mut() {
            let mut src = 0;
            for (k, &i) in idx.iter().enumerate() {
                src += i * old_strides[order[k]];
            }
            *slot = self.data[src];
            // odometer increment over new_shape
            for k in (0..r).rev() {
                idx[k] += 1;
                if idx[k] < new_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data: out,
        })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DttnError::Dim(format!(
                "hadamard shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Tensor (outer) product: rank(a)+rank(b), entry (i..,j..) = a(i..)*b(j..).
    pub fn outer(&self, other: &Self) -> Self {
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        let mut data = Vec::with_capacity(self.data.len() * other.data.len());
        for &a in &self.data {
            for &b in &other.data {
                data.push(a * b);
            }
        }
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DttnError::Dim(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DttnError::Dim(format!(
                "sub shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }
}

/// General contraction: sum over the paired axes of `a` and `b`.
///
/// Free modes of `a` precede free modes of `b` in the result, each in their
/// original order. Paired axes are summed in the listed order, row-major,
/// so the reduction order is deterministic.
pub fn contract<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<Tensor<T>> {
    if axes_a.len() != axes_b.len() {
        return Err(DttnError::Dim(format!(
            "contract axis lists differ in length: {} vs {}",
            axes_a.len(),
            axes_b.len()
        )));
    }
    check_axes(a.shape().len(), axes_a)?;
    check_axes(b.shape().len(), axes_b)?;
    for (&ax, &bx) in axes_a.iter().zip(axes_b) {
        if a.shape()[ax] != b.shape()[bx] {
            return Err(DttnError::Dim(format!(
                "contracted extents differ: axis {ax} of a has {}, axis {bx} of b has {}",
                a.shape()[ax],
                b.shape()[bx]
            )));
        }
    }

    let free_a: Vec<usize> = (0..a.rank()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|i| !axes_b.contains(i)).collect();

    // Permute contracted axes of `a` to the back and of `b` to the front,
    // then the contraction is a plain matrix product.
    let mut order_a = free_a.clone();
    order_a.extend_from_slice(axes_a);
    let mut order_b = axes_b.to_vec();
    order_b.extend_from_slice(&free_b);
    let pa = a.permute(&order_a)?;
    let pb = b.permute(&order_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape()[i]).product();
    let k: usize = axes_a.iter().map(|&i| a.shape()[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape()[i]).product();

    let mut out = vec![T::ZERO; m * n];
    let da = pa.data();
    let db = pb.data();
    for i in 0..m {
        let arow = &da[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &db[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }

    let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape()[i]).collect();
    shape.extend(free_b.iter().map(|&i| b.shape()[i]));
    Tensor::new(shape, out)
}

fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank {
            return Err(DttnError::Index(format!(
                "axis {ax} out of range for rank {rank}"
            )));
        }
        if axes[..i].contains(&ax) {
            return Err(DttnError::Index(format!("axis {ax} listed twice")));
        }
    }
    Ok(())
}

/// Column-wise Kronecker (Khatri-Rao) product of two matrices with equal
/// column counts: column j of the result is colA_j ⊗ colB_j.
pub fn khatri_rao<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(DttnError::Dim(
            "khatri_rao expects matrices".to_string(),
        ));
    }
    let (ra, ca) = (a.shape()[0], a.shape()[1]);
    let (rb, cb) = (b.shape()[0], b.shape()[1]);
    if ca != cb {
        return Err(DttnError::Dim(format!(
            "khatri_rao column counts differ: {ca} vs {cb}"
        )));
    }
    let mut out = Tensor::zeros(&[ra * rb, ca]);
    for i in 0..ra {
        for k in 0..rb {
            let row = i * rb + k;
            for j in 0..ca {
                out.data_mut()[row * ca + j] = a.data()[i * ca + j] * b.data()[k * ca + j];
            }
        }
    }
    Ok(out)
}

/// Matrix-vector product for 2-mode tensors; convenience wrapper over
/// `contract` used throughout the verifier.
pub fn matvec<T: Scalar>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if m.rank() != 2 || v.rank() != 1 {
        return Err(DttnError::Dim("matvec expects matrix and vector".to_string()));
    }
    contract(m, v, &[1], &[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (i + 1) as f64)
    }

    /// Naive sum-of-products contraction used as the independent oracle.
    /// Contracted indices iterate in listed-axis order, matching the
    /// implementation's documented reduction order.
    fn contract_naive(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        axes_a: &[usize],
        axes_b: &[usize],
    ) -> Tensor<f64> {
        let free_a: Vec<usize> = (0..a.rank()).filter(|i| !axes_a.contains(i)).collect();
        let free_b: Vec<usize> = (0..b.rank()).filter(|i| !axes_b.contains(i)).collect();
        let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape()[i]).collect();
        shape.extend(free_b.iter().map(|&i| b.shape()[i]));
        let ksizes: Vec<usize> = axes_a.iter().map(|&i| a.shape()[i]).collect();
        let ktotal: usize = ksizes.iter().product();
        let out_n: usize = shape.iter().product::<usize>().max(1);

        let mut out = vec![0.0f64; out_n];
        let mut out_idx = vec![0usize; shape.len()];
        for slot in out.iter_mut() {
            let mut acc = 0.0;
            for kflat in 0..ktotal {
                // decode kflat into contracted indices, row-major over ksizes
                let mut rem = kflat;
                let mut kidx = vec![0usize; ksizes.len()];
                for (pos, &ks) in ksizes.iter().enumerate().rev() {
                    kidx[pos] = rem % ks;
                    rem /= ks;
                }
                let mut ia = vec![0usize; a.rank()];
                for (pos, &ax) in free_a.iter().enumerate() {
                    ia[ax] = out_idx[pos];
                }
                for (pos, &ax) in axes_a.iter().enumerate() {
                    ia[ax] = kidx[pos];
                }
                let mut ib = vec![0usize; b.rank()];
                for (pos, &ax) in free_b.iter().enumerate() {
                    ib[ax] = out_idx[free_a.len() + pos];
                }
                for (pos, &ax) in axes_b.iter().enumerate() {
                    ib[ax] = kidx[pos];
                }
                acc += a.at(&ia) * b.at(&ib);
            }
            *slot = acc;
            for k in (0..shape.len()).rev() {
                out_idx[k] += 1;
                if out_idx[k] < shape[k] {
                    break;
                }
                out_idx[k] = 0;
            }
        }
        Tensor::new(shape, out).unwrap()
    }

    #[test]
    fn contract_ones_matrix_product() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::<f64>::ones(&[3, 2]);
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn contract_entrywise_example() {
        // 1x2x2 against 2x2x1x1 over modes (1,2)|(0,1):
        // sum of products 1*1 + 2*2 + 3*3 + 4*4 = 30 in a 1x1x1 result.
        let a = iota(&[1, 2, 2]);
        let b = iota(&[2, 2, 1, 1]);
        let c = contract(&a, &b, &[1, 2], &[0, 1]).unwrap();
        assert_eq!(c.shape(), &[1, 1, 1]);
        assert_eq!(c.data()[0], 30.0);
    }

    #[test]
    fn contract_identity_leaves_tensor_unchanged() {
        let t = iota(&[3, 4]);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let c = contract(&t, &eye, &[1], &[0]).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn contract_matches_naive_reference_exactly() {
        // All shapes small enough to brute force; equality must be exact.
        let cases: Vec<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> = vec![
            (vec![2, 3], vec![3, 4], vec![1], vec![0]),
            (vec![2, 3, 4], vec![4, 3, 2], vec![1, 2], vec![1, 0]),
            (vec![5, 2, 3], vec![3, 7], vec![2], vec![0]),
            (vec![4, 4], vec![4, 4], vec![0, 1], vec![1, 0]),
            (vec![2, 2, 2, 2], vec![2, 2], vec![3], vec![0]),
            (vec![6], vec![6], vec![0], vec![0]),
        ];
        for (sa, sb, axa, axb) in cases {
            let a = Tensor::from_fn(&sa, |i| ((i * 7 + 3) % 11) as f64 - 5.0);
            let b = Tensor::from_fn(&sb, |i| ((i * 5 + 1) % 13) as f64 - 6.0);
            let got = contract(&a, &b, &axa, &axb).unwrap();
            let want = contract_naive(&a, &b, &axa, &axb);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert_eq!(g, w, "shapes {sa:?} x {sb:?}");
            }
        }
    }

    #[test]
    fn contract_rejects_mismatched_extents() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::<f64>::ones(&[4, 2]);
        let err = contract(&a, &b, &[1], &[0]).unwrap_err();
        assert!(matches!(err, DttnError::Dim(_)));
        assert!(err.to_string().contains("axis 1"));
        assert!(err.to_string().contains("axis 0"));
    }

    #[test]
    fn contract_rejects_out_of_range_axis() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::<f64>::ones(&[3, 2]);
        assert!(matches!(
            contract(&a, &b, &[5], &[0]).unwrap_err(),
            DttnError::Index(_)
        ));
        assert!(matches!(
            contract(&a, &b, &[1, 1], &[0, 1]).unwrap_err(),
            DttnError::Index(_)
        ));
    }

    #[test]
    fn hadamard_basics() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.hadamard(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert_eq!(a.hadamard(&Tensor::ones(&[3])).unwrap(), a);
        assert!(a
            .hadamard(&Tensor::zeros(&[3]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a.hadamard(&Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn outer_basics() {
        let u = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let o = u.outer(&v);
        assert_eq!(o.shape(), &[2, 2]);
        assert_eq!(o.data(), &[3.0, 4.0, 6.0, 8.0]);

        let e0 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(e0.outer(&e0).data(), &[1.0, 0.0, 0.0, 0.0]);

        let s = Tensor::scalar(2.0);
        let t = iota(&[2, 2]);
        assert_eq!(s.outer(&t).data(), t.scale(2.0).data());
    }

    #[test]
    fn outer_contract_adjointness() {
        let u = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let v = Tensor::new(vec![4], vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        let uv = u.outer(&v);
        let back = contract(&uv, &v, &[1], &[0]).unwrap();
        let nv: f64 = v.data().iter().map(|&x| x * x).sum();
        for (b, &uu) in back.data().iter().zip(u.data()) {
            assert!((b - uu * nv).abs() < 1e-12);
        }
    }

    #[test]
    fn khatri_rao_basis_column() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let kr = khatri_rao(&a, &a).unwrap();
        assert_eq!(kr.shape(), &[4, 1]);
        assert_eq!(kr.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn khatri_rao_per_column_kronecker() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let kr = khatri_rao(&a, &b).unwrap();
        assert_eq!(kr.shape(), &[4, 2]);
        // col1 = (1,3)⊗(5,7) = (5,7,15,21); col2 = (2,4)⊗(6,8) = (12,16,24,32)
        assert_eq!(
            kr.data(),
            &[5.0, 12.0, 7.0, 16.0, 15.0, 24.0, 21.0, 32.0]
        );
    }

    #[test]
    fn khatri_rao_rejects_column_mismatch() {
        let a = Tensor::<f64>::ones(&[2, 2]);
        let b = Tensor::<f64>::ones(&[2, 3]);
        assert!(matches!(
            khatri_rao(&a, &b).unwrap_err(),
            DttnError::Dim(_)
        ));
    }

    #[test]
    fn reshape_keeps_linear_order() {
        let t = iota(&[2, 3]);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_is_transpose_for_matrices() {
        let t = iota(&[2, 3]);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
    }

    #[test]
    fn offset_round_trip() {
        let t = iota(&[3, 4, 5]);
        let mut n = 0;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    assert_eq!(t.offset_of(&[i, j, k]).unwrap(), n);
                    assert_eq!(t.at(&[i, j, k]), (n + 1) as f64);
                    n += 1;
                }
            }
        }
        assert!(t.offset_of(&[3, 0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn reshape_then_reshape_back_is_identity(
            dims in proptest::collection::vec(1usize..5, 1..4)
        ) {
            let t = Tensor::<f64>::from_fn(&dims, |i| i as f64 * 0.25 - 3.0);
            let n = t.len();
            let flat = t.reshape(&[n]).unwrap();
            let back = flat.reshape(&dims).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn permute_then_inverse_is_identity(
            dims in proptest::collection::vec(1usize..5, 1..5),
            seed in 0u64..1000
        ) {
            let r = dims.len();
            // derive a permutation from the seed
            let mut order: Vec<usize> = (0..r).collect();
            let mut s = seed;
            for i in (1..r).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut inverse = vec![0usize; r];
            for (i, &o) in order.iter().enumerate() {
                inverse[o] = i;
            }
            let t = Tensor::<f64>::from_fn(&dims, |i| (i as f64) * 1.5 - 7.0);
            let round = t.permute(&order).unwrap().permute(&inverse).unwrap();
            prop_assert_eq!(round, t);
        }
    }
}
