use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry check: `max |a_ij - a_ji| <= tol * max |a_ij|`.
pub fn is_symmetric(a: &Matrix, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    /// Factor a symmetric matrix; only the lower triangle is read.
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!(
                "cholesky of a {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower_mut(&self, b: &mut Matrix) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn solve_upper_mut(&self, b: &mut Matrix) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let m = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m);
        Vector::from_column_slice(x.as_slice())
    }

    /// `L⁻¹ b`, the whitened vector used for quadratic forms.
    pub fn whiten(&self, b: &Vector) -> Vector {
        let mut m = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_lower_mut(&mut m);
        Vector::from_column_slice(m.as_slice())
    }

    pub fn inverse(&self) -> Matrix {
        let mut inv = self.solve(&Matrix::identity(self.dim(), self.dim()));
        symmetrize(&mut inv);
        inv
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub(crate) fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    CholeskyFactor::new(a).map(|f| f.l)
}

/// Solves `A X = B` for positive-definite `A`.
pub fn solve_psd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.nrows() != a.nrows() {
        return Err(Error::Shape(format!(
            "solve with A {}x{} and B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(CholeskyFactor::new(a)?.solve(b))
}

pub fn logdet_psd(a: &Matrix) -> Result<f64> {
    Ok(CholeskyFactor::new(a)?.logdet())
}

/// Smallest and largest eigenvalue of a symmetric PSD matrix.
pub fn eig_extrema_psd(a: &Matrix) -> Result<(f64, f64)> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Shape("eigenvalues of a non-square matrix".into()));
    }
    let eig = SymmetricEigen::try_new(a.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Convergence("symmetric eigen-decomposition".into()))?;
    let ev = eig.eigenvalues;
    Ok((ev.min(), ev.max()))
}
