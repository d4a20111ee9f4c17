use nalgebra::DMatrix;

/// Compressed sparse rows of a constant square operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Keeps entries with `|v| > drop_tol`.
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square operator expected");
        let n = m.nrows();
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v.abs() > drop_tol {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for p in self.indptr[i]..self.indptr[i + 1] {
                rows[self.indices[p]].push((i, self.values[p]));
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            n: self.n,
            indptr,
            indices,
            values,
        }
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| {
            self.indptr[i + 1] - self.indptr[i] == 1
                && self.indices[self.indptr[i]] == i
                && self.values[self.indptr[i]] == 1.0
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `out += self * x` where `x` and `out` are `n x width`, row-major.
    pub fn mul_add(&self, x: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n * width);
        debug_assert_eq!(out.len(), self.n * width);
        for i in 0..self.n {
            let dst = &mut out[i * width..(i + 1) * width];
            for p in self.indptr[i]..self.indptr[i + 1] {
                let v = self.values[p];
                let src = &x[self.indices[p] * width..(self.indices[p] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}

/// Chebyshev polynomials of the scaled Laplacian in sparse form, with their
/// transposes for the backward pass.
#[derive(Clone, Debug)]
pub struct ChebOperators {
    pub polys: Vec<Csr>,
    pub transposed: Vec<Csr>,
}

impl ChebOperators {
    pub fn new(polys: &[DMatrix<f64>]) -> Self {
        let polys: Vec<Csr> = polys.iter().map(|m| Csr::from_dense(m, 1e-14)).collect();
        let transposed = polys.iter().map(Csr::transpose).collect();
        ChebOperators { polys, transposed }
    }

    pub fn order(&self) -> usize {
        self.polys.len()
    }

    pub fn node_count(&self) -> usize {
        self.polys.first().map_or(0, |p| p.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_matches_dense() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, -1.0, 0.5, 0.0]);
        let csr = Csr::from_dense(&m, 0.0);
        assert_eq!(csr.nnz(), 5);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 6];
        csr.mul_add(&x, 2, &mut out);
        assert_eq!(out, [11.0, 14.0, 9.0, 12.0, 0.5, 0.0]);
        let back = csr.transpose().transpose();
        assert_eq!(back, csr);
        assert!(Csr::from_dense(&DMatrix::identity(4, 4), 0.0).is_identity());
    }
}
