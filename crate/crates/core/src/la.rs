//! Dense f32 linear algebra.
//!
//! Vectors are plain `[f32]` slices and multiply matrices from the left
//! (`x·W`). Every reduction runs in a fixed left-to-right order, so a
//! product is bit-identical whichever storage order the matrix uses.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    RowMajor,
    ColMajor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    order: Order,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from storage-ordered data, rejecting NaN/Inf.
    pub fn new(rows: usize, cols: usize, order: Order, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("matrix data length", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self {
            rows,
            cols,
            order,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, order: Order) -> Self {
        Self {
            rows,
            cols,
            order,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize, order: Order) -> Self {
        Self::from_fn(n, n, order, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Fills element `(r, c)` with `f(r, c)`, visiting elements in storage order.
    pub fn from_fn(rows: usize, cols: usize, order: Order, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        match order {
            Order::RowMajor => {
                for r in 0..rows {
                    for c in 0..cols {
                        data.push(f(r, c));
                    }
                }
            }
            Order::ColMajor => {
                for c in 0..cols {
                    for r in 0..rows {
                        data.push(f(r, c));
                    }
                }
            }
        }
        Self {
            rows,
            cols,
            order,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Raw mutable storage. Bypasses the finiteness check, which tests use
    /// to poison weights that a kernel must never read.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, r: usize, c: usize) -> usize {
        match self.order {
            Order::RowMajor => r * self.cols + c,
            Order::ColMajor => c * self.rows + r,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        self.data[self.offset(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        let o = self.offset(r, c);
        self.data[o] = v;
    }

    /// Contiguous column `c` of a column-major matrix.
    pub fn column(&self, c: usize) -> Option<&[f32]> {
        match self.order {
            Order::ColMajor if c < self.cols => Some(&self.data[c * self.rows..(c + 1) * self.rows]),
            _ => None,
        }
    }

    pub fn column_mut(&mut self, c: usize) -> Option<&mut [f32]> {
        match self.order {
            Order::ColMajor if c < self.cols => Some(&mut self.data[c * self.rows..(c + 1) * self.rows]),
            _ => None,
        }
    }

    /// Same logical matrix in the requested storage order.
    pub fn to_order(&self, order: Order) -> Matrix {
        if order == self.order {
            return self.clone();
        }
        Matrix::from_fn(self.rows, self.cols, order, |r, c| self.get(r, c))
    }

    /// Logical transpose. Reinterprets the storage, so no data moves.
    pub fn transpose(self) -> Matrix {
        let order = match self.order {
            Order::RowMajor => Order::ColMajor,
            Order::ColMajor => Order::RowMajor,
        };
        Matrix {
            rows: self.cols,
            cols: self.rows,
            order,
            data: self.data,
        }
    }
}

/// `out[j] = Σ_r x[r]·data[r·n_out + j]`, reduction index outermost.
fn axpy_kernel(data: &[f32], n_red: usize, n_out: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n_out];
    if n_out == 0 {
        return out;
    }
    for (xr, row) in x.iter().zip(data.chunks_exact(n_out)).take(n_red) {
        let xr = *xr;
        for (o, w) in out.iter_mut().zip(row) {
            *o += xr * w;
        }
    }
    out
}

/// `out[j] = Σ_r x[r]·data[j·n_red + r]`, reduction index contiguous.
///
/// Eight outputs are accumulated side by side; each one is still summed
/// strictly in index order.
fn dot_kernel(data: &[f32], n_red: usize, n_out: usize, x: &[f32]) -> Vec<f32> {
    const LANES: usize = 8;
    let mut out = vec![0.0f32; n_out];
    if n_red == 0 {
        return out;
    }
    let mut j = 0;
    while j + LANES <= n_out {
        let cols: [&[f32]; LANES] = std::array::from_fn(|l| &data[(j + l) * n_red..(j + l + 1) * n_red]);
        let mut acc = [0.0f32; LANES];
        for (r, &xr) in x.iter().enumerate().take(n_red) {
            for l in 0..LANES {
                acc[l] += xr * cols[l][r];
            }
        }
        out[j..j + LANES].copy_from_slice(&acc);
        j += LANES;
    }
    for (jj, o) in out.iter_mut().enumerate().skip(j) {
        *o = dot(x, &data[jj * n_red..(jj + 1) * n_red]);
    }
    out
}

/// Sequential left-to-right dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row vector times matrix: `x·m`, length `m.cols()`.
pub fn gemv(m: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(Error::dims("gemv input length", m.rows, x.len()));
    }
    Ok(match m.order {
        Order::RowMajor => axpy_kernel(&m.data, m.rows, m.cols, x),
        Order::ColMajor => dot_kernel(&m.data, m.rows, m.cols, x),
    })
}

/// Row vector times transposed matrix: `x·mᵀ`, length `m.rows()`.
pub fn gemv_t(m: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != m.cols {
        return Err(Error::dims("gemv_t input length", m.cols, x.len()));
    }
    Ok(match m.order {
        Order::RowMajor => dot_kernel(&m.data, m.cols, m.rows, x),
        Order::ColMajor => axpy_kernel(&m.data, m.cols, m.rows, x),
    })
}

/// `out[k] = x·m[:, cols[k]]` for a column-major `m`, reading only the
/// listed columns. Each output is summed in row order.
pub fn gemv_columns(m: &Matrix, x: &[f32], cols: &[usize]) -> Result<Vec<f32>> {
    const LANES: usize = 8;
    if m.order != Order::ColMajor {
        return Err(Error::invalid("gemv_columns needs a column-major matrix"));
    }
    if x.len() != m.rows {
        return Err(Error::dims("gemv_columns input length", m.rows, x.len()));
    }
    if let Some(&c) = cols.iter().find(|&&c| c >= m.cols) {
        return Err(Error::dims("gemv_columns column index bound", m.cols, c));
    }
    let n = m.rows;
    let col = |c: usize| &m.data[c * n..(c + 1) * n];
    let mut out = vec![0.0f32; cols.len()];
    let mut chunks = cols.chunks_exact(LANES);
    let mut k = 0;
    for chunk in &mut chunks {
        let cs: [&[f32]; LANES] = std::array::from_fn(|l| col(chunk[l]));
        let mut acc = [0.0f32; LANES];
        for (r, &xr) in x.iter().enumerate() {
            for l in 0..LANES {
                acc[l] += xr * cs[l][r];
            }
        }
        out[k..k + LANES].copy_from_slice(&acc);
        k += LANES;
    }
    for &c in chunks.remainder() {
        out[k] = dot(x, col(c));
        k += 1;
    }
    Ok(out)
}

/// `Σ_k coeffs[k]·m[:, cols[k]]` for a column-major `m`, accumulated in
/// the order the columns are listed.
pub fn combine_columns(m: &Matrix, coeffs: &[f32], cols: &[usize]) -> Result<Vec<f32>> {
    if m.order != Order::ColMajor {
        return Err(Error::invalid("combine_columns needs a column-major matrix"));
    }
    if coeffs.len() != cols.len() {
        return Err(Error::dims(
            "combine_columns coefficient count",
            cols.len(),
            coeffs.len(),
        ));
    }
    if let Some(&c) = cols.iter().find(|&&c| c >= m.cols) {
        return Err(Error::dims("combine_columns column index bound", m.cols, c));
    }
    let n = m.rows;
    let mut out = vec![0.0f32; n];
    for (&a, &c) in coeffs.iter().zip(cols) {
        for (o, w) in out.iter_mut().zip(&m.data[c * n..(c + 1) * n]) {
            *o += a * w;
        }
    }
    Ok(out)
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| silu_scalar(x)).collect()
}

/// Indices of the `k` largest entries, ties to the lower index, returned
/// in ascending index order.
pub fn top_k(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::invalid(format!("top_k: k={k} outside 1..={}", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

pub fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt() as f32
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine operand length", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let Some(max) = v.iter().copied().reduce(f32::max) else {
        return Vec::new();
    };
    let e: Vec<f64> = v.iter().map(|&x| f64::from(x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| (x / sum) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn column_kernels_match_dense_paths() {
        let m = Matrix::from_fn(13, 21, Order::ColMajor, |r, c| ((r * 7 + c * 3) % 11) as f32 - 5.0);
        let x: Vec<f32> = (0..13).map(|i| 0.25 * i as f32 - 1.0).collect();
        let all: Vec<usize> = (0..21).collect();
        assert_eq!(gemv_columns(&m, &x, &all).unwrap(), gemv(&m, &x).unwrap());
        let dense = gemv(&m, &x).unwrap();
        let pick = [2usize, 3, 5, 8, 9, 10, 11, 17, 20];
        let got = gemv_columns(&m, &x, &pick).unwrap();
        for (g, &c) in got.iter().zip(&pick) {
            assert_eq!(*g, dense[c]);
        }
        let coeffs: Vec<f32> = (0..21).map(|i| i as f32 * 0.5 - 3.0).collect();
        assert_eq!(
            combine_columns(&m, &coeffs, &all).unwrap(),
            gemv_t(&m, &coeffs).unwrap()
        );
        assert!(gemv_columns(&m, &x, &[21]).is_err());
        assert!(combine_columns(&m.to_order(Order::RowMajor), &[1.0], &[0]).is_err());
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, Order::RowMajor, |_, _| rng.random_range(-1.0..1.0))
    }

    // Literal triple loop, kept separate from the kernels above.
    fn naive_gemv(m: &Matrix, x: &[f32]) -> Vec<f32> {
        (0..m.cols())
            .map(|j| {
                let mut acc = 0.0f32;
                for (i, &xi) in x.iter().enumerate().take(m.rows()) {
                    acc += xi * m.get(i, j);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gemv_identity_and_zero() {
        let x = [1.0, 2.0, 3.0];
        for order in [Order::RowMajor, Order::ColMajor] {
            assert_eq!(gemv(&Matrix::identity(3, order), &x).unwrap(), x);
            assert_eq!(gemv(&Matrix::zeros(3, 4, order), &x).unwrap(), [0.0; 4]);
        }
    }

    #[test]
    fn gemv_matches_naive_bitwise_in_both_orders() {
        let m = seeded_matrix(7, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = naive_gemv(&m, &x);
        let row = gemv(&m, &x).unwrap();
        let col = gemv(&m.to_order(Order::ColMajor), &x).unwrap();
        assert_eq!(row, oracle);
        assert_eq!(col, oracle);
    }

    #[test]
    fn gemv_wide_col_major_uses_lanes_and_tail() {
        let m = seeded_matrix(33, 21, 5);
        let x: Vec<f32> = (0..33).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(gemv(&m.to_order(Order::ColMajor), &x).unwrap(), naive_gemv(&m, &x));
    }

    #[test]
    fn gemv_t_is_gemv_of_transpose() {
        let m = seeded_matrix(6, 9, 3);
        let x: Vec<f32> = (0..9).map(|i| i as f32 - 4.0).collect();
        let t = m.clone().transpose();
        assert_eq!(gemv_t(&m, &x).unwrap(), naive_gemv(&t, &x));
        let mc = m.to_order(Order::ColMajor);
        assert_eq!(gemv_t(&mc, &x).unwrap(), naive_gemv(&t, &x));
    }

    #[test]
    fn gemv_dim_mismatch() {
        let m = Matrix::zeros(3, 2, Order::RowMajor);
        assert!(matches!(gemv(&m, &[1.0; 2]), Err(Error::DimMismatch { .. })));
        assert!(gemv_t(&m, &[1.0; 3]).is_err());
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::new(2, 2, Order::RowMajor, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 2, Order::RowMajor, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(&[0.0]), [0.0]);
        let v = silu(&[-20.0])[0];
        assert!(v < 0.0 && v.abs() < 1e-7);
        // minimum on a fine grid
        let (mut best_x, mut best) = (0.0f32, f32::INFINITY);
        for i in 0..=40_000 {
            let x = -4.0 + i as f32 * 1e-4;
            let y = silu_scalar(x);
            if y < best {
                best = y;
                best_x = x;
            }
        }
        assert!((best + 0.2785).abs() < 1e-4, "min {best}");
        assert!((best_x + 1.2785).abs() < 1e-3, "argmin {best_x}");
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2).unwrap(), [1, 2]);
        assert_eq!(top_k(&[0.3; 5], 2).unwrap(), [0, 1]);
        assert!(top_k(&[1.0], 0).is_err());
        assert!(top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pairs: Vec<(f32, usize)> = v.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut want: Vec<usize> = pairs[..2].iter().map(|p| p.1).collect();
        want.sort();
        assert_eq!(top_k(&v, 2).unwrap(), want);
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0, 2.0, -3.0];
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&a, &[-1.0, -2.0, 3.0]).unwrap(), -1.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), [0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]);
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f32> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e: Vec<f64> = v.iter().map(|&x| f64::from(x).exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in softmax(&v).iter().zip(e.iter().map(|x| x / z)) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec_of(n: usize) -> impl Strategy<Value = Vec<f32>> {
            prop::collection::vec(-10.0f32..10.0, n)
        }

        proptest! {
            #[test]
            fn identity_gemv(x in vec_of(6)) {
                prop_assert_eq!(gemv(&Matrix::identity(6, Order::ColMajor), &x).unwrap(), x);
            }

            #[test]
            fn gemv_is_linear(
                w in vec_of(20), x in vec_of(5), y in vec_of(5),
                a in -3.0f32..3.0, b in -3.0f32..3.0,
            ) {
                let m = Matrix::new(5, 4, Order::RowMajor, w).unwrap();
                let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
                let lhs = gemv(&m, &mix).unwrap();
                let gx = gemv(&m, &x).unwrap();
                let gy = gemv(&m, &y).unwrap();
                let scale = gx.iter().chain(&gy).map(|v| v.abs()).fold(1.0f32, f32::max)
                    * (a.abs() + b.abs()).max(1.0);
                for j in 0..4 {
                    let rhs = a * gx[j] + b * gy[j];
                    prop_assert!((lhs[j] - rhs).abs() <= 1e-5 * scale);
                }
            }

            #[test]
            fn silu_bounded_below(x in -50.0f32..50.0) {
                prop_assert!(silu_scalar(x) + 0.2785 >= -1e-4);
            }

            #[test]
            fn top_k_is_sort_oracle(v in vec_of(10), k in 1usize..=10) {
                let mut idx: Vec<usize> = (0..10).collect();
                idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
                let mut want = idx[..k].to_vec();
                want.sort();
                prop_assert_eq!(top_k(&v, k).unwrap(), want);
            }

            #[test]
            fn softmax_is_distribution(v in vec_of(12)) {
                let s = softmax(&v);
                prop_assert!(s.iter().all(|&p| p >= 0.0));
                let total: f32 = s.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }
    }
}
