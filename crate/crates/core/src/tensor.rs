//! Dense row-major `f64` tensors and the handful of kernels the models need.
//!
//! There are no views and no general broadcasting: matrices are rank-2
//! tensors, bias vectors are rank-1, and the only implicit broadcast is a
//! bias added to every row of a matrix.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Domain(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Self::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.last_dim() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.last_dim();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`, shapes must agree in element count.
    pub fn axpy(&mut self, factor: f64, other: &Self) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("axpy", &self.shape, &other.shape));
        }
        axpy(&mut self.data, factor, &other.data);
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a rank-1 bias to every row.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let c = self.last_dim();
        if bias.len() != c {
            return Err(Error::dim("add_row_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Scaled by the largest entry so tiny and huge norms survive squaring.
    pub fn frobenius(&self) -> f64 {
        let m = self.max_abs();
        if m == 0.0 || !m.is_finite() {
            return m;
        }
        m * self.data.iter().map(|v| (v / m).powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn to_nalgebra(&self) -> Result<DMatrix<f64>> {
        let (r, c) = self.dims2("to_nalgebra")?;
        Ok(DMatrix::from_row_slice(r, c, &self.data))
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four running partial sums so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Standard matrix product `a[m×k] · b[k×n]`.
///
/// Accumulates each output entry over `k` in ascending order, so the result
/// is bit-identical to the textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            axpy(orow, aip, &b.data[p * n..(p + 1) * n]);
        }
    }
    Ok(out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let n4 = n - n % 4;
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        // Four rows of `b` at a time so each load of `arow` is reused.
        for j in (0..n4).step_by(4) {
            let b0 = &b.data[j * k..(j + 1) * k];
            let b1 = &b.data[(j + 1) * k..(j + 2) * k];
            let b2 = &b.data[(j + 2) * k..(j + 3) * k];
            let b3 = &b.data[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for p in 0..k {
                let x = arow[p];
                s0 += x * b0[p];
                s1 += x * b1[p];
                s2 += x * b2[p];
                s3 += x * b3[p];
            }
            orow[j] = s0;
            orow[j + 1] = s1;
            orow[j + 2] = s2;
            orow[j + 3] = s3;
        }
        for j in n4..n {
            orow[j] = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    Ok(out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[a.last_dim(), b.last_dim()]);
    matmul_tn_acc(&mut out, a, b)?;
    Ok(out)
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 || out.shape() != [m, n] {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a.data[p * m + i];
            if api != 0.0 {
                axpy(&mut out.data[i * n..(i + 1) * n], api, brow);
            }
        }
    }
    Ok(())
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 || out.len() != m * n {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    for i in 0..m {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip != 0.0 {
                axpy(orow, aip, &b.data[p * n..(p + 1) * n]);
            }
        }
    }
    Ok(())
}

fn softmax_slice(input: &[f64], out: &mut [f64]) {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax of a vector, computed after subtracting the maximum.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if !v.is_finite() {
        return Err(Error::Domain("softmax input has non-finite entries".into()));
    }
    let mut out = Tensor::zeros(v.shape());
    softmax_slice(&v.data, &mut out.data);
    Ok(out)
}

/// Softmax applied independently to every row (last axis).
pub fn softmax_rows(v: &Tensor) -> Result<Tensor> {
    if !v.is_finite() {
        return Err(Error::Domain("softmax input has non-finite entries".into()));
    }
    let c = v.last_dim();
    let mut out = Tensor::zeros(v.shape());
    for (i, o) in v.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        softmax_slice(i, o);
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// modReLU on one coordinate: `sign(z)·max(|z| + bias, 0)`.
pub fn modrelu(z: f64, bias: f64) -> f64 {
    let mag = (z.abs() + bias).max(0.0);
    if z > 0.0 {
        mag
    } else if z < 0.0 {
        -mag
    } else {
        0.0
    }
}

/// Elementwise nonlinearity with its parameters.
#[derive(Clone, Debug)]
pub enum Nonlinearity {
    Tanh,
    ModRelu(Tensor),
    Identity,
}

pub fn nonlinearity(kind: &Nonlinearity, z: &Tensor) -> Result<Tensor> {
    match kind {
        Nonlinearity::Tanh => Ok(z.map(f64::tanh)),
        Nonlinearity::Identity => Ok(z.clone()),
        Nonlinearity::ModRelu(bias) => {
            let c = z.last_dim();
            if bias.len() != c {
                return Err(Error::dim("modrelu", z.shape(), bias.shape()));
            }
            let mut out = z.clone();
            for row in out.data.chunks_exact_mut(c) {
                for (v, b) in row.iter_mut().zip(&bias.data) {
                    *v = modrelu(*v, *b);
                }
            }
            Ok(out)
        }
    }
}

/// Activation family of a recurrent cell, without its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Modrelu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Self::Tanh),
            "modrelu" => Ok(Self::Modrelu),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Modrelu => "modrelu",
            Self::Identity => "identity",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    GlorotUniform,
    Orthogonal,
    Zeros,
}

pub fn init_matrix(rng: &mut Rng, scheme: InitScheme, rows: usize, cols: usize) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Domain(format!("cannot initialise a {rows}x{cols} matrix")));
    }
    match scheme {
        InitScheme::Zeros => Ok(Tensor::zeros(&[rows, cols])),
        InitScheme::GlorotUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Tensor::from_vec(&[rows, cols], data)
        }
        InitScheme::Orthogonal => {
            // QR of a tall Gaussian draw; transpose back for wide shapes.
            let (tall, wide) = (rows.max(cols), rows.min(cols));
            let draw = DMatrix::from_fn(tall, wide, |_, _| rng.normal());
            let qr = draw.qr();
            let mut q = qr.q();
            let r = qr.r();
            for j in 0..wide {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            let q = if rows >= cols { q } else { q.transpose() };
            Ok(Tensor::from_nalgebra(&q))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (mm, k) = a.dims2("t").unwrap();
        let (_, n) = b.dims2("t").unwrap();
        let mut out = Tensor::zeros(&[mm, n]);
        for i in 0..mm {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let p = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let v = m(&[&[5.0], &[7.0]]);
        assert_eq!(matmul(&p, &v).unwrap(), m(&[&[5.0], &[0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(11);
        let a = init_matrix(&mut rng, InitScheme::GlorotUniform, 3, 4).unwrap();
        let b = init_matrix(&mut rng, InitScheme::GlorotUniform, 4, 2).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).data());
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let mut rng = Rng::new(2);
        let a = init_matrix(&mut rng, InitScheme::GlorotUniform, 5, 7).unwrap();
        let b = init_matrix(&mut rng, InitScheme::GlorotUniform, 3, 7).unwrap();
        let want = naive_matmul(&a, &b.transpose().unwrap());
        assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
        let c = init_matrix(&mut rng, InitScheme::GlorotUniform, 5, 3).unwrap();
        let want = naive_matmul(&a.transpose().unwrap(), &c);
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&Tensor::scalar(-3.7)).unwrap().data(), &[1.0]);
        let u = softmax(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let big = softmax(&Tensor::from_vec(&[2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        assert!(matches!(
            softmax(&Tensor { shape: vec![0], data: vec![] }),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nonlinearity_examples() {
        assert_eq!(nonlinearity(&Nonlinearity::Tanh, &Tensor::scalar(0.0)).unwrap().item(), 0.0);
        let clipped = nonlinearity(&Nonlinearity::ModRelu(Tensor::scalar(-3.0)), &Tensor::scalar(2.0));
        assert_eq!(clipped.unwrap().item(), 0.0);
        let kept = nonlinearity(&Nonlinearity::ModRelu(Tensor::scalar(1.0)), &Tensor::scalar(-2.0));
        assert_eq!(kept.unwrap().item(), -3.0);
        assert!(matches!("relu6".parse::<Activation>(), Err(Error::Config(_))));
    }

    #[test]
    fn init_schemes() {
        let mut rng = Rng::new(1);
        assert_eq!(init_matrix(&mut rng, InitScheme::Zeros, 2, 2).unwrap(), Tensor::zeros(&[2, 2]));
        let g = init_matrix(&mut rng, InitScheme::GlorotUniform, 3, 5).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(g.data().iter().all(|v| v.abs() <= bound));
        let q = init_matrix(&mut rng, InitScheme::Orthogonal, 4, 4).unwrap();
        let qtq = matmul_tn(&q, &q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(4)).unwrap() < 1e-10);
        let wide = init_matrix(&mut rng, InitScheme::Orthogonal, 2, 5).unwrap();
        let rows = matmul_nt(&wide, &wide).unwrap();
        assert!(rows.max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-10);
    }
}
