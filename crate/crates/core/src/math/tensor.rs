use crate::error::{Error, Result};

/// Variance epsilon used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `c = alpha * op(a) * op(b) + beta * c`, row-major.
///
/// `op(a)` is `m×k` (stored `k×m` when `trans_a`), `op(b)` is `k×n`
/// (stored `n×k` when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A strided matrix view into a slice: element `(i, j)` lives at
/// `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(offset: usize, rs: usize, cs: usize) -> Self {
        Self { offset, rs, cs }
    }

    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

/// `c = alpha * a * b + beta * c` on strided views; `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    assert!(va.fits(m, k, a.len()), "gemm_view: lhs out of bounds");
    assert!(vb.fits(k, n, b.len()), "gemm_view: rhs out of bounds");
    assert!(vc.fits(m, n, c.len()), "gemm_view: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the views can reach, and
    // `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        false,
        false,
        m,
        n,
        k,
        1.0,
        &a.data,
        &b.data,
        0.0,
        &mut out.data,
    );
    Ok(out)
}

/// In-place numerically stabilized softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, stabilized.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    if x.data.iter().any(|v| v.is_infinite()) {
        return Err(Error::Numeric("softmax input contains infinity".into()));
    }
    let mut out = x.clone();
    let c = out.cols();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn l2_norm_slice(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l2_norm(x: &Tensor) -> f64 {
    l2_norm_slice(&x.data)
}

/// Euclidean distance between two equally long slices.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Layer normalization over the last axis with affine gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Dimension(
            "layer_norm needs a feature axis of at least 2".into(),
        ));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm gain/bias length {}/{} differ from feature size {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_with_ties(x: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Empty("argmax over an empty vector"));
    }
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.5],
        ])
        .unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);

        let b = Tensor::filled(&[3, 4], 1.5);
        let z = matmul(&Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let naive = |i: usize, j: usize| (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
        // a^T stored 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        // b^T stored 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c = vec![0.0; 8];
        gemm(true, true, 2, 4, 3, 1.0, &at, &bt, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                assert!((c[i * 4 + j] - naive(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::from_rows(&[vec![2.0, 2.0, 2.0]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let x = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&Tensor::zeros(&[5])), 0.0);
        assert_eq!(
            l2_norm(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()),
            5.0
        );
    }

    #[test]
    fn layer_norm_cases() {
        let gain = Tensor::filled(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap();
        // var = 1, so the only deviation comes from the epsilon.
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);

        let gain = Tensor::filled(&[4], 3.0);
        let bias = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = Tensor::filled(&[1, 4], 7.0);
        let y = layer_norm(&c, &gain, &bias).unwrap();
        assert_eq!(y.data(), bias.data());

        let one = Tensor::zeros(&[3, 1]);
        assert!(layer_norm(&one, &Tensor::zeros(&[1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax_with_ties(&[0.0, 5.0, 5.0]).unwrap(), 1);
        assert_eq!(argmax_with_ties(&[7.0]).unwrap(), 0);
        assert!(argmax_with_ties(&[]).is_err());
    }

    fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-50.0f64..50.0, rows * cols)
            .prop_map(move |d| Tensor::from_vec(&[rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in finite_matrix(4, 7)) {
            let p = softmax_rows(&x).unwrap();
            for r in 0..4 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn l2_norm_matches_scalar_loop(v in proptest::collection::vec(-10.0f64..10.0, 0..40)) {
            let mut acc = 0.0;
            for x in &v {
                acc += x * x;
            }
            let t = Tensor::from_vec(&[v.len()], v.clone()).unwrap();
            let n = l2_norm(&t);
            prop_assert!((n - acc.sqrt()).abs() <= 1e-12 * (1.0 + acc.sqrt()));
            prop_assert_eq!(n == 0.0, v.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn argmax_matches_linear_scan(v in proptest::collection::vec(-5i32..5, 1..30)) {
            let x: Vec<f64> = v.iter().map(|&i| f64::from(i)).collect();
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = x.iter().position(|&e| e == max).unwrap();
            prop_assert_eq!(argmax_with_ties(&x).unwrap(), first);
        }

        #[test]
        fn matmul_is_associative(a in finite_matrix(3, 4), b in finite_matrix(4, 2), c in finite_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = l2_norm(&left).max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn layer_norm_output_is_centered(x in finite_matrix(3, 6)) {
            let y = layer_norm(&x, &Tensor::filled(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
            for r in 0..3 {
                let m: f64 = y.row(r).iter().sum::<f64>() / 6.0;
                prop_assert!(m.abs() < 1e-9);
            }
        }
    }
}
