use crate::scalar::Scalar;

/// Dense row-major matrix. Rows are embedding vectors throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `out = self * v`
    pub fn mul_vec_into(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(self.row(i), v);
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// `out += selfᵀ * v`
    pub fn tmul_vec_acc(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &vi) in v.iter().enumerate() {
            crate::scalar::axpy(vi, self.row(i), out);
        }
    }

    /// `self += scale * a bᵀ`
    pub fn add_outer(&mut self, scale: T, a: &[T], b: &[T]) {
        for (i, &ai) in a.iter().enumerate() {
            crate::scalar::axpy(scale * ai, b, self.row_mut(i));
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Gram matrix `Σ_i s_i · row_i row_iᵀ`, rows without a weight use 1.
    pub fn weighted_gram(&self, weights: Option<&[T]>) -> Matrix<T> {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for i in 0..self.rows {
            let w = weights.map_or(T::one(), |w| w[i]);
            if w == T::zero() {
                continue;
            }
            g.add_outer(w, self.row(i), self.row(i));
        }
        g
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_and_transpose_mul_agree_with_hand_values() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(m.mul_vec(&[1.0, -1.0]), vec![-1.0, -1.0, -1.0]);
        let mut out = vec![0.0; 2];
        m.tmul_vec_acc(&[1.0, 0.0, 1.0], &mut out);
        assert_eq!(out, vec![6.0, 8.0]);
    }

    #[test]
    fn gram_is_sum_of_outer_products() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]);
        let g = m.weighted_gram(Some(&[2.0, 1.0]));
        assert_eq!(g.as_slice(), &[2.0, 4.0, 4.0, 17.0]);
    }
}
