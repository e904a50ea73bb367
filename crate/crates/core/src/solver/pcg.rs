//! Compressed-row symmetric matrices and Jacobi-preconditioned conjugate
//! gradients, used for problems too large for envelope factorization.

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix from per-row sorted column lists covering both triangles.
    pub fn zeros(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            cols.extend_from_slice(r);
            row_ptr.push(cols.len());
        }
        let values = vec![0.0; cols.len()];
        Self {
            row_ptr,
            cols,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let r = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        r.binary_search(&j).ok().map(|p| self.row_ptr[i] + p)
    }

    /// Adds `v` at `(i, j)` and, off the diagonal, at `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside sparsity pattern");
        self.values[s] += v;
        if i != j {
            let s = self.slot(j, i).expect("entry outside sparsity pattern");
            self.values[s] += v;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.add(i, i, v);
    }

    pub fn clear(&mut self) {
        self.values.fill(0.0);
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let range = self.row_ptr[i]..self.row_ptr[i + 1];
                self.cols[range.clone()]
                    .iter()
                    .zip(&self.values[range])
                    .map(|(&c, &v)| v * x[c])
                    .sum()
            })
            .collect()
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct PcgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive semi-definite `A` given as a
/// matrix-vector product. Variables with zero diagonal are held at zero.
pub fn pcg(
    matvec: impl Fn(&[f64]) -> Vec<f64>,
    diag: &[f64],
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> PcgResult {
    let n = b.len();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = b.iter().zip(&inv_diag).map(|(b, m)| if *m > 0.0 { *b } else { 0.0 }).collect();
    let b_norm = dot(&r, &r).sqrt();
    if b_norm == 0.0 {
        return PcgResult {
            x,
            iterations: 0,
            converged: true,
        };
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = matvec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return PcgResult {
                x,
                iterations: it,
                converged: false,
            };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * b_norm {
            return PcgResult {
                x,
                iterations: it + 1,
                converged: true,
            };
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    PcgResult {
        x,
        iterations: max_iter,
        converged: false,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
