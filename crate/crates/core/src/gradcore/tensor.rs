use serde::{Deserialize, Serialize};

/// Dense row-major 2-D array of `f64`.
///
/// Every value on the tape is a `Tensor`; scalars are `1 x 1`, a batch of
/// per-sample vectors is `batch x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match shape"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::new(1, cols, data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self::new(rows, 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum this tensor down to `shape`, undoing a broadcast.
    pub(crate) fn reduce_to(&self, shape: (usize, usize)) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape.0, shape.1);
        for r in 0..self.rows {
            let orow = if shape.0 == 1 { 0 } else { r };
            for c in 0..self.cols {
                let ocol = if shape.1 == 1 { 0 } else { c };
                out.data[orow * shape.1 + ocol] += self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Element of a tensor that may be broadcast along either axis.
    #[inline]
    pub(crate) fn bget(&self, r: usize, c: usize) -> f64 {
        let rr = if self.rows == 1 { 0 } else { r };
        let cc = if self.cols == 1 { 0 } else { c };
        self.data[rr * self.cols + cc]
    }

    /// `self (n x k) * other (k x m)`.
    pub(crate) fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.shape();
        let m = other.cols;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    /// `self (n x k) * other^T` where `other` is `m x k`.
    pub(crate) fn matmul_transposed(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.shape();
        let m = other.rows;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(n, m, out)
    }

    /// `self^T * other` where `self` is `n x k` and `other` is `n x m`.
    pub(crate) fn transposed_matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.shape();
        let m = other.cols;
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let brow = &other.data[i * m..(i + 1) * m];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(k, m, out)
    }
}
