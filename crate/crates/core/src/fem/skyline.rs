//! Skyline (variable-band) LDLᵀ factorization for complex symmetric matrices.
//!
//! Only the lower profile is stored: row `i` keeps columns `first[i]..=i`
//! contiguously. No pivoting; the matrices factored here have a positive
//! definite real part, for which symmetric elimination is stable.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Skyline {
    n: usize,
    first: Vec<usize>,
    /// Offset of row `i` in `values`; row length is `i - first[i] + 1`.
    start: Vec<usize>,
    values: Vec<Complex64>,
    factored: bool,
}

impl Skyline {
    /// Allocates the profile covering every `(row, col)` in `entries` (either triangle).
    pub fn with_profile(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j) in entries {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            first[r] = first[r].min(c);
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(acc);
            acc += i - f + 1;
        }
        start.push(acc);
        Self {
            n,
            first,
            start,
            values: vec![Complex64::new(0.0, 0.0); acc],
            factored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries in the lower profile.
    pub fn profile_len(&self) -> usize {
        self.values.len()
    }

    fn row(&self, i: usize) -> &[Complex64] {
        &self.values[self.start[i]..self.start[i + 1]]
    }

    /// Adds `v` to entry `(i, j)`; symmetric, so either triangle may be named.
    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        debug_assert!(!self.factored);
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        assert!(c >= self.first[r], "entry ({r}, {c}) outside the allocated profile");
        let k = self.start[r] + (c - self.first[r]);
        self.values[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if c < self.first[r] {
            Complex64::new(0.0, 0.0)
        } else {
            self.values[self.start[r] + (c - self.first[r])]
        }
    }

    /// In-place LDLᵀ. Afterwards row `i` holds `L[i, first[i]..i]` and `D[i]` on the diagonal.
    pub fn factorize(&mut self) -> Result<()> {
        let scale = (0..self.n)
            .map(|i| self.get(i, i).norm())
            .fold(0.0f64, f64::max);
        let tiny = scale * 1e-14;
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            // Pass 1: t_ij = a_ij - sum_k t_ik L_jk, for j in fi..i.
            for j in fi..i {
                let fj = self.first[j];
                let lo = fi.max(fj);
                let sj = self.start[j];
                let mut s = Complex64::new(0.0, 0.0);
                if lo < j {
                    let ri = &self.values[si + (lo - fi)..si + (j - fi)];
                    let rj = &self.values[sj + (lo - fj)..sj + (j - fj)];
                    for (a, b) in ri.iter().zip(rj) {
                        s += a * b;
                    }
                }
                self.values[si + (j - fi)] -= s;
            }
            // Pass 2: L_ij = t_ij / D_j and D_i = a_ii - sum t_ij L_ij.
            let mut d = self.values[si + (i - fi)];
            for j in fi..i {
                let dj = self.values[self.start[j + 1] - 1];
                let t = self.values[si + (j - fi)];
                let l = t / dj;
                d -= t * l;
                self.values[si + (j - fi)] = l;
            }
            if !(d.norm() > tiny) || !d.is_finite() {
                return Err(Error::Singular(format!(
                    "zero pivot at row {i} (|d| = {:e})",
                    d.norm()
                )));
            }
            self.values[si + (i - fi)] = d;
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place using the factorization.
    pub fn solve_in_place(&self, x: &mut [Complex64]) {
        assert!(self.factored, "solve called before factorize");
        assert_eq!(x.len(), self.n);
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let row = self.row(i);
            let mut s = Complex64::new(0.0, 0.0);
            for (l, y) in row[..i - fi].iter().zip(&x[fi..i]) {
                s += l * y;
            }
            x[i] -= s;
        }
        // D z = y
        for i in 0..self.n {
            x[i] /= self.row(i)[i - self.first[i]];
        }
        // Lᵀ x = z
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let xi = x[i];
            let row = self.row(i);
            for (l, xk) in row[..i - fi].iter().zip(&mut x[fi..i]) {
                *xk -= l * xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn solves_tridiagonal_complex_system() {
        let n = 6;
        let entries: Vec<(usize, usize)> = (0..n).flat_map(|i: usize| [(i, i), (i, i.saturating_sub(1))]).collect();
        let mut m = Skyline::with_profile(n, entries);
        let mut dense = vec![vec![c(0.0, 0.0); n]; n];
        for i in 0..n {
            m.add(i, i, c(2.5, 0.3));
            dense[i][i] += c(2.5, 0.3);
            if i > 0 {
                m.add(i, i - 1, c(-1.0, 0.1));
                dense[i][i - 1] += c(-1.0, 0.1);
                dense[i - 1][i] += c(-1.0, 0.1);
            }
        }
        let x0: Vec<Complex64> = (0..n).map(|i| c(i as f64, 1.0 - i as f64)).collect();
        let mut b: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|j| dense[i][j] * x0[j]).sum())
            .collect();
        m.factorize().unwrap();
        m.solve_in_place(&mut b);
        for (a, e) in b.iter().zip(&x0) {
            assert!((a - e).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut m = Skyline::with_profile(2, [(0, 0), (1, 0), (1, 1)]);
        m.add(0, 0, c(1.0, 0.0));
        m.add(1, 0, c(-1.0, 0.0));
        m.add(1, 1, c(1.0, 0.0));
        assert!(matches!(m.factorize(), Err(Error::Singular(_))));
    }
}
