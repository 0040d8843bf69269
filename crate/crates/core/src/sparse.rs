//! Compressed sparse rows and an envelope (skyline) Cholesky factorization.

use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    /// Square matrix from `(row, col, value)` triplets; duplicates are summed
    /// in input order so the result is deterministic.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![T::zero(); triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols[slot] = c;
            vals[slot] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for r in 0..n {
            let mut entries: Vec<(usize, T)> = (counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])).collect();
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                if col_idx.len() > row_ptr[r] && *col_idx.last().unwrap() == c {
                    let last = values.last_mut().unwrap();
                    *last = *last + v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|k| v[k]).unwrap_or(T::zero())
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n).map(|i| self.row_dot(i, x)).collect()
    }

    #[inline]
    pub fn row_dot(&self, i: usize, x: &[T]) -> T {
        let (c, v) = self.row(i);
        c.iter().zip(v).fold(T::zero(), |s, (&j, &a)| s + a * x[j])
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max |a_ij − a_ji|`.
    pub fn max_asymmetry(&self) -> T {
        let mut m = T::zero();
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m = m.max((a - self.get(j, i)).abs());
            }
        }
        m
    }

    /// Principal submatrix on `keep` (ascending new numbering given by
    /// `map[old] = Some(new)`).
    pub fn submatrix(&self, map: &[Option<usize>], size: usize) -> Self {
        let mut triplets = Vec::new();
        for i in 0..self.n {
            let Some(ni) = map[i] else { continue };
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if let Some(nj) = map[j] {
                    triplets.push((ni, nj, a));
                }
            }
        }
        Self::from_triplets(size, &triplets)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("matrix is not positive definite at pivot {pivot} (value {value:e})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

/// `A = L Lᵀ` stored row-wise over the envelope of the lower triangle.
/// Solving borrows immutably, so one factor can serve many threads.
#[derive(Clone, Debug)]
pub struct SkylineCholesky<T> {
    n: usize,
    /// First stored column of each row.
    first: Vec<usize>,
    /// Offset of row `i`'s first stored entry; the diagonal sits at
    /// `start[i] + i − first[i]`.
    start: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> SkylineCholesky<T> {
    pub fn factor(a: &CsrMatrix<T>) -> Result<Self, NotPositiveDefinite> {
        let n = a.n();
        let mut first = vec![0usize; n];
        for (i, f) in first.iter_mut().enumerate() {
            let (c, _) = a.row(i);
            *f = c.first().copied().unwrap_or(i).min(i);
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for (i, &f) in first.iter().enumerate() {
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        let mut data = vec![T::zero(); total];
        for i in 0..n {
            let (c, v) = a.row(i);
            for (&j, &x) in c.iter().zip(v) {
                if j <= i {
                    data[start[i] + j - first[i]] = x;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            for j in fi..i {
                let fj = first[j];
                let sj = start[j];
                let k0 = fi.max(fj);
                let len = j - k0;
                let ri = &data[si + k0 - fi..si + k0 - fi + len];
                let rj = &data[sj + k0 - fj..sj + k0 - fj + len];
                let dot = ri.iter().zip(rj).fold(T::zero(), |s, (&a, &b)| s + a * b);
                let djj = data[sj + j - fj];
                let idx = si + j - fi;
                data[idx] = (data[idx] - dot) / djj;
            }
            let row = &data[si..si + i - fi];
            let sq = row.iter().fold(T::zero(), |s, &x| s + x * x);
            let d = data[si + i - fi] - sq;
            if !(d > T::zero()) {
                return Err(NotPositiveDefinite { pivot: i, value: d.as_f64() });
            }
            data[si + i - fi] = d.sqrt();
        }
        Ok(Self { n, first, start, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [T]) {
        assert_eq!(x.len(), self.n);
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            let row = &self.data[si..si + i - fi];
            let dot = row.iter().zip(&x[fi..i]).fold(T::zero(), |s, (&l, &y)| s + l * y);
            x[i] = (x[i] - dot) / self.data[si + i - fi];
        }
        // Lᵀ x = y, column sweep
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            x[i] = x[i] / self.data[si + i - fi];
            let xi = x[i];
            for (k, &l) in self.data[si..si + i - fi].iter().enumerate() {
                x[fi + k] = x[fi + k] - l * xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{DenseCholesky, Matrix};

    fn laplacian_1d(n: usize) -> CsrMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (0, 0, 3.0), (1, 1, 5.0)]);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![6.0, 5.0]);
    }

    #[test]
    fn skyline_matches_dense() {
        // arrow-plus-band SPD matrix with a ragged envelope
        let n = 12;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 10.0 + i as f64));
            if i >= 3 {
                t.push((i, i - 3, 1.0 + 0.1 * i as f64));
                t.push((i - 3, i, 1.0 + 0.1 * i as f64));
            }
            if i > 0 && i % 2 == 0 {
                t.push((i, 0, 0.5));
                t.push((0, i, 0.5));
            }
        }
        let a = CsrMatrix::from_triplets(n, &t);
        let f = SkylineCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let mut dense = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                dense[(i, j)] = a.get(i, j);
            }
        }
        let y = DenseCholesky::new(&dense).unwrap().solve(&b);
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-14);
        }
        let r = a.mul_vec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert_eq!(SkylineCholesky::factor(&a).unwrap_err().pivot, 1);
    }

    #[test]
    fn tridiagonal_solution() {
        let a = laplacian_1d(50);
        let f = SkylineCholesky::factor(&a).unwrap();
        assert_eq!(f.envelope_size(), 99);
        let x = f.solve(&vec![1.0; 50]);
        // u'' = -1 discretized: x_i = (i+1)(50-i)/2
        for (i, v) in x.iter().enumerate() {
            let want = (i as f64 + 1.0) * (50.0 - i as f64) / 2.0;
            assert!((v - want).abs() < 1e-9 * want);
        }
        let sub = a.submatrix(&(0..50).map(|i| (i < 10).then_some(i)).collect::<Vec<_>>(), 10);
        assert_eq!(sub.n(), 10);
        assert_eq!(sub.max_asymmetry(), 0.0);
    }
}
