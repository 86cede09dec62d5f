use std::fmt;

use crate::error::{Error, Result};

/// Guard below which a norm is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row vector `[1, len]`.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new([1, n], data).expect("non-empty row")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::new([rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
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

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Column `j` of a rank-2 tensor, copied out.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|i| self.data[i * cols + j]).collect()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2("transpose")?;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = self.data[i * cols + j];
            }
        }
        Self::new([cols, rows], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dims {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new([m, p], out)
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len)
                    .map(|a| self.data[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (self.data[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// Scales every slice along `axis` to unit Euclidean norm; slices with
    /// norm below [`NORM_EPS`] map to zero.
    pub fn l2_normalize(&self, axis: usize) -> Result<Self> {
        Ok(l2_normalize_with_norms(self, axis)?.0)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Normalized tensor plus the per-slice norms (outer-major, inner-minor).
pub(crate) fn l2_normalize_with_norms(x: &Tensor, axis: usize) -> Result<(Tensor, Vec<f64>)> {
    let (outer, len, inner) = axis_split(&x.shape, axis, "l2_normalize")?;
    let mut out = x.data.clone();
    let mut norms = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let norm = (0..len)
                .map(|a| x.data[idx(a)].powi(2))
                .sum::<f64>()
                .sqrt();
            for a in 0..len {
                out[idx(a)] = if norm > NORM_EPS {
                    x.data[idx(a)] / norm
                } else {
                    0.0
                };
            }
            norms.push(norm);
        }
    }
    Ok((Tensor::new(x.shape.clone(), out)?, norms))
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is below [`NORM_EPS`].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_sim",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Squared Frobenius norm of `c - target`.
pub fn fro_sq_diff(c: &Tensor, target: &Tensor) -> Result<f64> {
    let (r, cols) = c.dims2("fro_sq_diff")?;
    if r != cols || c.shape() != target.shape() {
        return Err(Error::dim(
            "fro_sq_diff",
            format!("{:?} vs {:?}", c.shape(), target.shape()),
        ));
    }
    Ok(c.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rejects_mismatched_shape() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let z = a.matmul(&Tensor::zeros([2, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let ones = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        let out = a.matmul(&ones).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros([2, 3]);
        let err = a.matmul(&Tensor::zeros([2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::row(vec![0.0, 0.0]).softmax(1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::row(vec![7.0; 3]).softmax(1).unwrap();
        for &v in s.data() {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
        // exp(k) / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / denom).collect();
        let s = Tensor::row(vec![1.0, 2.0, 3.0]).softmax(1).unwrap();
        for (got, want) in s.data().iter().zip(&expected) {
            assert!(approx(*got, *want, 1e-15));
        }
        assert!(approx(s.data()[0], 0.0900, 1e-4));
        assert!(approx(s.data()[1], 0.2447, 1e-4));
        assert!(approx(s.data()[2], 0.6652, 1e-4));
    }

    #[test]
    fn softmax_axis_zero_sums_columns() {
        let x = Tensor::from_rows(&[vec![1.0, -3.0], vec![2.0, 5.0], vec![0.5, 0.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        for j in 0..2 {
            let total: f64 = s.column(j).iter().sum();
            assert!(approx(total, 1.0, 1e-12));
        }
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let n = Tensor::row(vec![3.0, 4.0]).l2_normalize(1).unwrap();
        assert!(approx(n.data()[0], 0.6, 1e-15) && approx(n.data()[1], 0.8, 1e-15));
        let again = n.l2_normalize(1).unwrap();
        for (a, b) in n.data().iter().zip(again.data()) {
            assert!(approx(*a, *b, 1e-12));
        }
        let z = Tensor::row(vec![0.0, 0.0]).l2_normalize(1).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        assert!(approx(cosine_sim(&v, &v).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(approx(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.70711,
            1e-5
        ));
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fro_sq_diff_examples() {
        let i = Tensor::eye(2);
        assert_eq!(fro_sq_diff(&i, &i).unwrap(), 0.0);
        let c = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert!(approx(fro_sq_diff(&c, &i).unwrap(), 0.5, 1e-15));
        let c3 = Tensor::from_rows(&[vec![1.0, 1.5], vec![1.5, 1.0]]).unwrap();
        assert!(approx(fro_sq_diff(&c3, &i).unwrap(), 9.0 * 0.5, 1e-12));
    }
}
