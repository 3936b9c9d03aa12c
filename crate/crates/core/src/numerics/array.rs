use serde::{Deserialize, Serialize};

use super::kernels::{self, Op};
use super::{NORM_EPS, NORM_VAR_EPS};
use crate::error::{Error, Result};

/// Storage precision of an [`Array`].
///
/// Values are always carried as `f64`; in `F32` mode every primitive rounds its
/// result through `f32`, which reproduces single-precision storage without a
/// second code path. Gradient checks must run in `F64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Array {
            shape,
            data,
            precision: Precision::F64,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            precision: Precision::F64,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            precision: Precision::F64,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
            precision: Precision::F64,
        }
    }

    /// Converts to `precision`, rounding stored values when narrowing.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self.round_in_place();
        self
    }

    fn round_in_place(&mut self) {
        if self.precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn derived(&self, shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Array {
        let mut out = Array {
            shape,
            data,
            precision,
        };
        out.round_in_place();
        out
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

    pub fn precision(&self) -> Precision {
        self.precision
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

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let o = self.offset(index);
        self.data[o] = self.precision.round(v);
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Array> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Array { shape, ..self })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        self.derived(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the shape around `axis` into (outer, extent, inner) counts.
    fn lanes(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s.remove(axis);
        s
    }
}

/// 2-D matrix product.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::dim(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, &a.data, Op::N, &b.data, Op::N, 0.0, &mut out);
    Ok(a.derived(vec![m, n], out, a.precision.join(b.precision)))
}

/// Softmax along `axis`, stabilized by subtracting the lane maximum.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    let (outer, n, inner) = x.lanes(axis)?;
    let mut out = x.data.clone();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = x.data[(o * n + j) * inner + i];
            }
            kernels::softmax_inplace(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out[(o * n + j) * inner + i] = *v;
            }
        }
    }
    Ok(x.derived(x.shape.clone(), out, x.precision))
}

/// Layer normalization along `axis` with per-position `gain` and `bias`
/// (both of length `shape[axis]`).
pub fn layer_norm(x: &Array, gain: &[f64], bias: &[f64], axis: usize) -> Result<Array> {
    let (outer, n, inner) = x.lanes(axis)?;
    if gain.len() != n || bias.len() != n {
        return Err(Error::dim(format!(
            "layer_norm affine params must have length {n}, got {} and {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| x.data[idx(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (x.data[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_VAR_EPS).sqrt();
            for j in 0..n {
                out[idx(j)] = (x.data[idx(j)] - mean) * inv * gain[j] + bias[j];
            }
        }
    }
    Ok(x.derived(x.shape.clone(), out, x.precision))
}

pub fn silu(x: &Array) -> Array {
    x.map(kernels::silu)
}

pub fn sigmoid(x: &Array) -> Array {
    x.map(kernels::sigmoid)
}

/// Euclidean norm along `axis`; the axis is removed from the result.
pub fn l2_norm(x: &Array, axis: usize) -> Result<Array> {
    let (outer, n, inner) = x.lanes(axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..n).map(|j| x.data[(o * n + j) * inner + i].powi(2)).sum();
            out[o * inner + i] = s.sqrt();
        }
    }
    Ok(x.derived(x.reduced_shape(axis), out, x.precision))
}

/// Cosine similarity along `axis`. Lanes where either vector has norm below
/// the guard yield 0.
pub fn cosine_sim(a: &Array, b: &Array, axis: usize) -> Result<Array> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "cosine_sim shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (outer, n, inner) = a.lanes(axis)?;
    let mut out = vec![0.0; outer * inner];
    let mut la = vec![0.0; n];
    let mut lb = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                la[j] = a.data[(o * n + j) * inner + i];
                lb[j] = b.data[(o * n + j) * inner + i];
            }
            out[o * inner + i] = kernels::cosine(&la, &lb, NORM_EPS);
        }
    }
    Ok(a.derived(a.reduced_shape(axis), out, a.precision.join(b.precision)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Array::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let i2 = arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let a = arr(&[1, 2], &[1.0, 0.0]);
        let b = arr(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Array::zeros(&[2, 3]);
        let b = Array::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::from_fn(&[5, 7], |_| rng.gen_range(-1.0..1.0));
        let b = Array::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert!((c.get(&[i, j]) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn f32_precision_rounds_results() {
        let a = arr(&[1, 1], &[0.1]).with_precision(Precision::F32);
        let b = arr(&[1, 1], &[3.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.precision(), Precision::F32);
        assert_eq!(c.data()[0], (0.1f32 as f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&arr(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&arr(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);

        let s = softmax(&arr(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[i] - v.exp() / z).abs() <= 1e-14);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = arr(&[2, 2], &[0.0, 5.0, 0.0, -5.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.get(&[0, 0]), 0.5);
        assert!((s.get(&[0, 1]) + s.get(&[1, 1]) - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let x = arr(&[1, 4], &[3.0; 4]);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let x = arr(&[2, 3], &[1.0, 2.0, 6.0, -1.0, 0.5, 4.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1).unwrap();
        for r in 0..2 {
            let row: Vec<f64> = (0..3).map(|c| y.get(&[r, c])).collect();
            let mean = row.iter().sum::<f64>() / 3.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn silu_and_sigmoid_at_zero() {
        let z = Array::zeros(&[3]);
        assert_eq!(silu(&z).data(), &[0.0; 3]);
        assert_eq!(sigmoid(&z).data(), &[0.5; 3]);
    }

    #[test]
    fn cosine_self_and_zero() {
        let v = arr(&[1, 3], &[0.3, -2.0, 1.1]);
        let c = cosine_sim(&v, &v, 1).unwrap();
        assert!((c.data()[0] - 1.0).abs() < 1e-15);
        let z = Array::zeros(&[1, 3]);
        assert_eq!(cosine_sim(&v, &z, 1).unwrap().data(), &[0.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let n = v.len();
            let s = softmax(&Array::new(vec![n], v).unwrap(), 0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn l2_norm_is_absolutely_homogeneous(
            v in proptest::collection::vec(-10.0f64..10.0, 1..12),
            c in -5.0f64..5.0,
        ) {
            let n = v.len();
            let x = Array::new(vec![1, n], v).unwrap();
            let base = l2_norm(&x, 1).unwrap().data()[0];
            let scaled = l2_norm(&x.map(|e| c * e), 1).unwrap().data()[0];
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * (1.0 + base * c.abs()));
        }

        #[test]
        fn cosine_in_unit_interval(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let a = Array::new(vec![4], a).unwrap();
            let b = Array::new(vec![4], b).unwrap();
            let c = cosine_sim(&a, &b, 0).unwrap().data()[0];
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
