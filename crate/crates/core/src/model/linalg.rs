//! Minimal dense 2-D tensor with the three matmul variants the tape needs.
//!
//! Kernels are written so the inner loops stream contiguous memory and carry
//! no cross-lane reductions (or a fixed four-lane tree where a reduction is
//! unavoidable); results are bitwise stable across thread counts and SIMD
//! widths.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = self x other. Inner loop runs along `other`'s rows, so updates are
    /// elementwise over the output row and vectorize without reductions.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Tensor::from_vec(m, n, out)
    }

    /// C = self x other^T; rows of both operands are contiguous, reduced with
    /// a fixed four-lane tree.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let (m, n) = (self.rows, other.rows);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let c_row = &mut out[i * n..(i + 1) * n];
            for (j, c) in c_row.iter_mut().enumerate() {
                *c = dot(a_row, other.row(j));
            }
        }
        Tensor::from_vec(m, n, out)
    }

    /// C = self^T x other, accumulated as rank-1 updates over the shared
    /// dimension; inner loop is elementwise over the output row.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let (m, r, c) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0f64; r * c];
        for i in 0..m {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (rr, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[rr * c..(rr + 1) * c];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(r, c, out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

/// Dot product with a fixed four-lane reduction tree.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for i in 0..4 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut rest = 0.0;
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        rest += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::util::rng_from(seed);
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Naive triple loop used as the oracle for all kernel variants.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..a.cols {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_variants_match_naive() {
        let a = random_tensor(7, 5, 1);
        let b = random_tensor(5, 9, 2);
        let nn = a.matmul(&b);
        let oracle = naive_matmul(&a, &b);
        for (x, y) in nn.data.iter().zip(&oracle.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = b.transpose();
        let nt = a.matmul_nt(&bt);
        for (x, y) in nt.data.iter().zip(&oracle.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = a.transpose();
        let tn = at.matmul_tn(&b);
        for (x, y) in tn.data.iter().zip(&oracle.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = random_tensor(4, 6, 3);
        assert_eq!(a.transpose().transpose(), a);
    }
}
