//! Small dense linear algebra used as an independent reference for the
//! sparse code paths. Only intended for images of a few thousand pixels.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest dimension the dense routines will materialise.
pub const MAX_DENSE_DIM: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Result<Self> {
        if n > MAX_DENSE_DIM {
            return Err(Error::usage(format!(
                "dense matrix of dimension {n} exceeds {MAX_DENSE_DIM}"
            )));
        }
        Ok(DenseMatrix {
            n,
            data: vec![0.0; n * n],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n)?;
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        let n = self.n;
        let mut out = DenseMatrix {
            n,
            data: vec![0.0; n * n],
        };
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn quad(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.matvec(v)).map(|(a, b)| a * b).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        DenseMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Lower Cholesky factor `C` with `A = C C^T`; fails if `A` is not positive definite.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.dim();
    let mut c = DenseMatrix::zeros(n)?;
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= c.get(j, k) * c.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::numeric(
                "dense_cholesky",
                format!("matrix not positive definite at pivot {j}"),
            ));
        }
        let djj = d.sqrt();
        c.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= c.get(i, k) * c.get(j, k);
            }
            c.set(i, j, s / djj);
        }
    }
    Ok(c)
}

/// Solves `C x = b` for lower-triangular `C`.
pub fn solve_lower(c: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = c.dim();
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= c.get(i, k) * x[k];
        }
        x[i] /= c.get(i, i);
    }
    x
}

/// Solves `C^T x = b` for lower-triangular `C`.
pub fn solve_lower_transpose(c: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = c.dim();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= c.get(k, i) * x[k];
        }
        x[i] /= c.get(i, i);
    }
    x
}

/// Inverse of a symmetric positive-definite matrix via triangular solves against the identity.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.dim();
    let c = cholesky(a)?;
    let mut inv = DenseMatrix::zeros(n)?;
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_lower_transpose(&c, &solve_lower(&c, &e));
        for (i, v) in col.into_iter().enumerate() {
            inv.set(i, j, v);
        }
    }
    Ok(inv)
}

pub fn spd_log_det(a: &DenseMatrix) -> Result<f64> {
    let c = cholesky(a)?;
    Ok(2.0 * (0..a.dim()).map(|i| c.get(i, i).ln()).sum::<f64>())
}

/// Multivariate normal described by its precision matrix.
#[derive(Clone, Debug)]
pub struct DenseGaussian {
    pub mean: Vec<f64>,
    pub precision: DenseMatrix,
}

impl DenseGaussian {
    pub fn covariance(&self) -> Result<DenseMatrix> {
        spd_inverse(&self.precision)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let n = self.mean.len();
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let log_det = spd_log_det(&self.precision)?;
        Ok(0.5 * log_det - 0.5 * self.precision.quad(&r) - 0.5 * n as f64 * (2.0 * PI).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> DenseMatrix {
        let mut a = DenseMatrix::zeros(3).unwrap();
        let vals = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                a.set(i, j, vals[i][j]);
            }
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let c = cholesky(&a).unwrap();
        let back = c.matmul(&c.transpose());
        assert!(back.sub(&a).frobenius() < 1e-12);
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = spd3();
        let inv = spd_inverse(&a).unwrap();
        let eye = DenseMatrix::identity(3).unwrap();
        assert!(a.matmul(&inv).sub(&eye).frobenius() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let mut a = DenseMatrix::identity(2).unwrap();
        a.set(1, 1, -1.0);
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn size_guard() {
        assert!(matches!(DenseMatrix::zeros(MAX_DENSE_DIM + 1), Err(Error::Usage(_))));
    }

    #[test]
    fn standard_normal_density_at_mode() {
        let g = DenseGaussian {
            mean: vec![0.0; 4],
            precision: DenseMatrix::identity(4).unwrap(),
        };
        let lp = g.log_density(&[0.0; 4]).unwrap();
        assert!((lp + 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }
}
