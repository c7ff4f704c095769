//! Dense row-major `f64` tensors and the handful of kernels the network needs.

use std::fmt;

use crate::error::{shape_mismatch, Error, Result};

/// Norms below this are treated as zero vectors by [`cosine_similarity`].
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Abs,
    Max0,
}

/// Right-hand side of an [`Elementwise`] op.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
    /// For the unary ops.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
    Mean,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(shape_mismatch(shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        self.strides().iter().zip(index).map(|(s, i)| s * i).sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_mismatch(&self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn elementwise(&self, op: Elementwise, rhs: Operand<'_>) -> Result<Self> {
        let data = match (op, rhs) {
            (Elementwise::Relu | Elementwise::Max0, _) => {
                self.data.iter().map(|&v| v.max(0.0)).collect()
            }
            (Elementwise::Abs, _) => self.data.iter().map(|v| v.abs()).collect(),
            (Elementwise::Scale, Operand::Scalar(s)) => self.data.iter().map(|v| v * s).collect(),
            (Elementwise::Scale, _) => {
                return Err(Error::BadParam("scale needs a scalar operand".into()))
            }
            (op, Operand::Scalar(s)) => self.data.iter().map(|&v| binary(op, v, s)).collect(),
            (op, Operand::Tensor(other)) => {
                if other.shape != self.shape {
                    return Err(shape_mismatch(&self.shape, &other.shape));
                }
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| binary(op, a, b))
                    .collect()
            }
            (_, Operand::None) => {
                return Err(Error::BadParam(format!("{op:?} needs an operand")))
            }
        };
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.max(0.0)).collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if other.shape != self.shape {
            return Err(shape_mismatch(&self.shape, &other.shape));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    /// Reduces over `axis`, or over everything when `axis` is `None` (rank-0 result).
    pub fn reduce(&self, op: Reduce, axis: Option<usize>) -> Result<Self> {
        self.reduce_with_argmax(op, axis).map(|(t, _)| t)
    }

    /// Like [`Tensor::reduce`]; for `Reduce::Max` also returns the flat input index of every
    /// selected element (first occurrence wins).
    pub fn reduce_with_argmax(
        &self,
        op: Reduce,
        axis: Option<usize>,
    ) -> Result<(Self, Option<Vec<usize>>)> {
        let (outer, len, inner, out_shape) = match axis {
            None => (1, self.data.len(), 1, Vec::new()),
            Some(axis) => {
                if axis >= self.rank() {
                    return Err(Error::AxisOutOfRange {
                        axis,
                        rank: self.rank(),
                    });
                }
                let outer = self.shape[..axis].iter().product();
                let inner = self.shape[axis + 1..].iter().product();
                let mut shape = self.shape.clone();
                shape.remove(axis);
                (outer, self.shape[axis], inner, shape)
            }
        };
        let mut out = vec![0.0; outer * inner];
        let mut argmax = (op == Reduce::Max).then(|| vec![0usize; outer * inner]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let slot = o * inner + i;
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..len).map(|k| self.data[at(k)]).sum();
                        out[slot] = if op == Reduce::Mean { s / len as f64 } else { s };
                    }
                    Reduce::Max => {
                        let mut best = at(0);
                        for k in 1..len {
                            if self.data[at(k)] > self.data[best] {
                                best = at(k);
                            }
                        }
                        out[slot] = self.data[best];
                        if let Some(a) = argmax.as_mut() {
                            a[slot] = best;
                        }
                    }
                }
            }
        }
        Ok((
            Self {
                shape: out_shape,
                data: out,
            },
            argmax,
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_mismatch(&self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::BadParam("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.shape[1..] != tail {
                return Err(shape_mismatch(&first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn binary(op: Elementwise, a: f64, b: f64) -> f64 {
    match op {
        Elementwise::Add => a + b,
        Elementwise::Sub => a - b,
        Elementwise::Mul | Elementwise::Scale => a * b,
        Elementwise::Relu | Elementwise::Max0 => a.max(0.0),
        Elementwise::Abs => a.abs(),
    }
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Cosine similarity and its gradients with respect to both arguments.
/// Degenerate inputs give zero similarity and zero gradients.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let cos = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - cos * bi / (nb * nb))
        .collect();
    (cos, ga, gb)
}

/// Four interleaved partial sums so the loop vectorizes; the summation order is fixed,
/// so results stay deterministic.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided_gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided_gemm(m, k, n, a, (1, m), b, (n, 1), c);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    strided_gemm(m, k, n, a, (k, 1), b, (1, k), c);
}

#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
                }
            }
        }
        out
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let m = t(&[3], &[-1.0, 0.0, 2.0]);
        let r = m.elementwise(Elementwise::Max0, Operand::None).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(a.scale(0.0).data(), &[0.0, 0.0]);
        assert_eq!(
            m.elementwise(Elementwise::Abs, Operand::None).unwrap().data(),
            &[1.0, 0.0, 2.0]
        );
        assert_eq!(
            a.elementwise(Elementwise::Sub, Operand::Scalar(1.0)).unwrap().data(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.reduce(Reduce::Sum, Some(0)).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.reduce(Reduce::Sum, Some(1)).unwrap().data(), &[3.0, 7.0]);
        let b = t(&[3], &[5.0, -1.0, 7.0]);
        let (m, arg) = b.reduce_with_argmax(Reduce::Max, None).unwrap();
        assert_eq!(m.data(), &[7.0]);
        assert_eq!(arg.unwrap(), vec![2]);
        let c = t(&[2], &[2.0, 4.0]);
        assert_eq!(c.reduce(Reduce::Mean, None).unwrap().data(), &[3.0]);
        assert!(matches!(
            a.reduce(Reduce::Sum, Some(2)),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let sel = t(&[1, 2], &[1.0, 0.0]);
        let col = t(&[2, 1], &[3.5, -9.0]);
        assert_eq!(sel.matmul(&col).unwrap().data(), &[3.5]);
        assert!(a.matmul(&col.reshape(&[1, 2]).unwrap()).is_err());

        let mut rng = Rng::new(11);
        let x = rng.uniform(-1.0, 1.0, &[3, 4]).unwrap();
        let y = rng.uniform(-1.0, 1.0, &[4, 2]).unwrap();
        let fast = x.matmul(&y).unwrap();
        for (f, n) in fast.data().iter().zip(naive_matmul(&x, &y)) {
            assert!((f - n).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_gemms_agree_with_plain() {
        let mut rng = Rng::new(5);
        let a = rng.uniform(-1.0, 1.0, &[3, 5]).unwrap();
        let b = rng.uniform(-1.0, 1.0, &[5, 4]).unwrap();
        let reference = a.matmul(&b).unwrap();
        // aᵀ stored as 5×3
        let mut at = vec![0.0; 15];
        for i in 0..3 {
            for p in 0..5 {
                at[p * 3 + i] = a.get(&[i, p]);
            }
        }
        let mut c = vec![0.0; 12];
        gemm_tn(3, 5, 4, &at, b.data(), &mut c);
        let mut bt = vec![0.0; 20];
        for p in 0..5 {
            for j in 0..4 {
                bt[j * 5 + p] = b.get(&[p, j]);
            }
        }
        let mut c2 = vec![0.0; 12];
        gemm_nt(3, 5, 4, a.data(), &bt, &mut c2);
        for i in 0..12 {
            assert!((c[i] - reference.data()[i]).abs() < 1e-12);
            assert!((c2[i] - reference.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn row_major_offsets_exhaustive() {
        let shape = [2, 3, 4];
        let x = Tensor::zeros(&shape);
        let mut expected = 0;
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(x.offset(&[i, j, k]), expected);
                    expected += 1;
                }
            }
        }
        assert_eq!(x.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -2.0, 1.5];
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.uniform(-1.0, 1.0, &[3, 4]).unwrap();
            let b = rng.uniform(-1.0, 1.0, &[4, 2]).unwrap();
            let c = rng.uniform(-1.0, 1.0, &[2, 5]).unwrap();
            let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn cosine_is_bounded(a in prop::collection::vec(-1e3f64..1e3, 1..8), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b = rng.uniform(-1e3, 1e3, &[a.len()]).unwrap();
            let c = cosine_similarity(&a, b.data());
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }

        #[test]
        fn cosine_grad_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.uniform(-1.0, 1.0, &[5]).unwrap().into_data();
            let b = rng.uniform(-1.0, 1.0, &[5]).unwrap().into_data();
            let (_, ga, _) = cosine_with_grad(&a, &b);
            let eps = 1e-6;
            for i in 0..5 {
                let mut ap = a.clone();
                ap[i] += eps;
                let mut am = a.clone();
                am[i] -= eps;
                let fd = (cosine_similarity(&ap, &b) - cosine_similarity(&am, &b)) / (2.0 * eps);
                prop_assert!((fd - ga[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
