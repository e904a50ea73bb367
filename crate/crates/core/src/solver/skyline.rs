//! Symmetric matrices in skyline (envelope) storage and their `L D L^T`
//! factorization.
//!
//! Row `i` stores the lower-triangle entries from its first structural
//! nonzero column `first[i]` up to the diagonal. Factorization fill stays
//! inside this envelope, which is narrow for image-grid problems (bandwidth
//! of two image rows), and the envelope is also closed under the recurrences
//! used for selected inversion.

/// Relative pivot size under which a variable is declared rank deficient.
const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SkylineMatrix {
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

impl SkylineMatrix {
    /// Zero matrix with the given envelope. `first[i] <= i` is required.
    pub fn zeros(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "skyline first column beyond diagonal");
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        Self {
            first,
            start,
            values: vec![0.0; total],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Number of stored entries.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        (col >= self.first[row] && col <= row).then(|| self.start[row] + col - self.first[row])
    }

    /// Adds `v` at `(i, j)` and its mirror. Panics outside the envelope.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let s = self.slot(r, c).expect("entry outside skyline envelope");
        self.values[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.slot(r, c).map_or(0.0, |s| self.values[s])
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.values[self.start[i + 1] - 1]
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        let s = self.start[i + 1] - 1;
        self.values[s] += v;
    }

    pub fn clear(&mut self) {
        self.values.fill(0.0);
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let f = self.first[i];
            let row = &self.values[self.start[i]..self.start[i + 1]];
            let (off, d) = row.split_at(row.len() - 1);
            let mut acc = d[0] * x[i];
            for (c, &a) in off.iter().enumerate() {
                acc += a * x[f + c];
                y[f + c] += a * x[i];
            }
            y[i] += acc;
        }
        y
    }

    /// Dense copy, for tests and diagnostics.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// `L D L^T` factorization. Pivots that vanish relative to their original
    /// diagonal mark the variable rank deficient; such variables are removed
    /// from the system (their solution component is zero).
    pub fn factor(&self) -> LdlFactor {
        let n = self.dim();
        let mut values = self.values.clone();
        let mut inv_d = vec![0.0; n];
        let mut deficient = vec![false; n];
        let max_diag = (0..n).map(|i| self.diag(i)).fold(0.0f64, f64::max);

        for i in 0..n {
            let fi = self.first[i];
            let (before, rest) = values.split_at_mut(self.start[i]);
            let row = &mut rest[..self.start[i + 1] - self.start[i]];
            // Row i first holds g_ij = L_ij d_j, converted to L_ij below.
            for j in fi..i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                if k0 < j {
                    let lj = &before[self.start[j] + (k0 - fj)..self.start[j] + (j - fj)];
                    let gi = &row[k0 - fi..j - fi];
                    let dot: f64 = gi.iter().zip(lj).map(|(a, b)| a * b).sum();
                    row[j - fi] -= dot;
                }
            }
            let a_ii = row[i - fi];
            let mut d = a_ii;
            for j in fi..i {
                let g = row[j - fi];
                let l = g * inv_d[j];
                d -= l * g;
                row[j - fi] = l;
            }
            row[i - fi] = d;
            let tol = (PIVOT_TOLERANCE * a_ii).max(1e-15 * max_diag);
            if d > tol && d.is_finite() {
                inv_d[i] = 1.0 / d;
            } else {
                deficient[i] = true;
                inv_d[i] = 0.0;
            }
        }

        LdlFactor {
            first: self.first.clone(),
            start: self.start.clone(),
            values,
            inv_d,
            deficient,
        }
    }
}

/// Result of [`SkylineMatrix::factor`].
#[derive(Debug, Clone)]
pub struct LdlFactor {
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
    inv_d: Vec<f64>,
    deficient: Vec<bool>,
}

impl LdlFactor {
    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn deficient(&self) -> &[bool] {
        &self.deficient
    }

    pub fn is_full_rank(&self) -> bool {
        !self.deficient.iter().any(|&d| d)
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        // Off-diagonal part of row i of L.
        &self.values[self.start[i]..self.start[i + 1] - 1]
    }

    /// Solves `A x = b`; deficient components of `x` are zero.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            let f = self.first[i];
            let dot: f64 = self.row(i).iter().zip(&x[f..i]).map(|(l, y)| l * y).sum();
            x[i] -= dot;
        }
        for i in 0..n {
            x[i] *= self.inv_d[i];
        }
        for i in (0..n).rev() {
            let f = self.first[i];
            let xi = x[i];
            if xi != 0.0 {
                let row = &self.values[self.start[i]..self.start[i + 1] - 1];
                for (c, l) in row.iter().enumerate() {
                    x[f + c] -= l * xi;
                }
            }
        }
        x
    }

    /// Diagonal of `A^{-1}` via the Takahashi recurrences restricted to the
    /// envelope. Deficient variables yield `None`.
    pub fn inverse_diagonal(&self) -> Vec<Option<f64>> {
        let n = self.dim();
        // Rows k > i with a stored entry in column i, ascending.
        let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            for c in self.first[k]..k {
                col_rows[c].push(k);
            }
        }
        let mut z = vec![0.0; self.values.len()];
        let slot = |r: usize, c: usize| -> usize {
            let (r, c) = if r >= c { (r, c) } else { (c, r) };
            debug_assert!(c >= self.first[r]);
            self.start[r] + c - self.first[r]
        };
        let l_at = |k: usize, i: usize| self.values[self.start[k] + i - self.first[k]];

        let mut col_vals = Vec::new();
        for i in (0..n).rev() {
            let rows = &col_rows[i];
            if self.deficient[i] {
                continue;
            }
            col_vals.clear();
            for &j in rows {
                let mut acc = 0.0;
                for &k in rows {
                    acc -= l_at(k, i) * z[slot(k, j)];
                }
                col_vals.push(acc);
            }
            let mut zii = self.inv_d[i];
            for (&k, &zki) in rows.iter().zip(&col_vals) {
                z[slot(k, i)] = zki;
                zii -= l_at(k, i) * zki;
            }
            z[slot(i, i)] = zii;
        }
        (0..n)
            .map(|i| (!self.deficient[i]).then(|| z[slot(i, i)]))
            .collect()
    }

    /// Single entry `(A^{-1})_{ii}` by one solve against the unit vector.
    pub fn inverse_entry(&self, i: usize) -> Option<f64> {
        if self.deficient[i] {
            return None;
        }
        let mut e = vec![0.0; self.dim()];
        e[i] = 1.0;
        Some(self.solve(&e)[i])
    }
}
