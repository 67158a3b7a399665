use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::dense::{spd_inverse, DenseGaussian, DenseMatrix, MAX_DENSE_DIM};
use super::pattern::SparsityPattern;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

/// Sparse lower-triangular factor `L` of a precision matrix `LL^T`.
///
/// Coefficients follow the pattern's flat entry order. Diagonal entries are
/// stored as their logarithm, so every materialised diagonal is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedCholesky {
    pattern: Arc<SparsityPattern>,
    coeffs: Vec<f64>,
}

/// Dense views of a packed factor.
#[derive(Clone, Debug)]
pub struct DenseFactor {
    pub lower: DenseMatrix,
    pub precision: DenseMatrix,
    pub covariance: DenseMatrix,
}

impl PackedCholesky {
    /// From raw slot-major values `[num_slots][num_pixels]`; slot 0 is the log-diagonal.
    ///
    /// Slots that fall outside the image for a pixel are ignored.
    pub fn from_slots(pattern: Arc<SparsityPattern>, slots: &[f64]) -> Result<Self> {
        let n_p = pattern.num_pixels();
        if slots.len() != pattern.num_slots() * n_p {
            return Err(Error::usage(format!(
                "expected {} slot values, got {}",
                pattern.num_slots() * n_p,
                slots.len()
            )));
        }
        let mut coeffs = Vec::with_capacity(pattern.nnz());
        for p in 0..n_p {
            for &k in pattern.row_slots(p) {
                coeffs.push(slots[k * n_p + p]);
            }
        }
        Self::checked(pattern, coeffs)
    }

    /// From materialised entries in flat pattern order; diagonals must be positive.
    pub fn from_entries(pattern: Arc<SparsityPattern>, entries: &[f64]) -> Result<Self> {
        if entries.len() != pattern.nnz() {
            return Err(Error::usage(format!(
                "expected {} entries, got {}",
                pattern.nnz(),
                entries.len()
            )));
        }
        let mut coeffs = entries.to_vec();
        for p in 0..pattern.num_pixels() {
            let d = pattern.diag_index(p);
            if !(coeffs[d] > 0.0) {
                return Err(Error::numeric(
                    "packed_cholesky",
                    format!("non-positive diagonal {} at pixel {p}", coeffs[d]),
                ));
            }
            coeffs[d] = coeffs[d].ln();
        }
        Self::checked(pattern, coeffs)
    }

    /// From internal coefficients (log-diagonal convention).
    pub fn from_raw(pattern: Arc<SparsityPattern>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != pattern.nnz() {
            return Err(Error::usage(format!(
                "expected {} coefficients, got {}",
                pattern.nnz(),
                coeffs.len()
            )));
        }
        Self::checked(pattern, coeffs)
    }

    fn checked(pattern: Arc<SparsityPattern>, coeffs: Vec<f64>) -> Result<Self> {
        for p in 0..pattern.num_pixels() {
            for e in pattern.row_range(p) {
                let c = coeffs[e];
                let ok = if e == pattern.diag_index(p) {
                    let d = c.exp();
                    d > 0.0 && d.is_finite()
                } else {
                    c.is_finite()
                };
                if !ok {
                    return Err(Error::numeric(
                        "packed_cholesky",
                        format!("invalid coefficient {c} at pixel {p}"),
                    ));
                }
            }
        }
        Ok(PackedCholesky { pattern, coeffs })
    }

    pub fn identity(pattern: Arc<SparsityPattern>) -> Self {
        Self::scaled_identity(pattern, 1.0)
    }

    /// `L = c I`, `c > 0`.
    pub fn scaled_identity(pattern: Arc<SparsityPattern>, c: f64) -> Self {
        assert!(c > 0.0, "diagonal must be positive");
        let mut coeffs = vec![0.0; pattern.nnz()];
        for p in 0..pattern.num_pixels() {
            coeffs[pattern.diag_index(p)] = c.ln();
        }
        PackedCholesky { pattern, coeffs }
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Internal coefficients (diagonal as logarithm).
    pub fn raw(&self) -> &[f64] {
        &self.coeffs
    }

    /// Materialised value of flat entry `e`.
    pub fn entry(&self, e: usize) -> f64 {
        if self.pattern.slots()[e] == 0 {
            self.coeffs[e].exp()
        } else {
            self.coeffs[e]
        }
    }

    pub fn entries(&self) -> Vec<f64> {
        (0..self.coeffs.len()).map(|e| self.entry(e)).collect()
    }

    pub fn diag(&self, p: usize) -> f64 {
        self.coeffs[self.pattern.diag_index(p)].exp()
    }

    pub fn log_diag(&self, p: usize) -> f64 {
        self.coeffs[self.pattern.diag_index(p)]
    }

    /// `log|LL^T| = 2 sum_p log L_pp`
    pub fn log_det_precision(&self) -> f64 {
        2.0 * (0..self.pattern.num_pixels()).map(|p| self.log_diag(p)).sum::<f64>()
    }

    pub fn log_det_covariance(&self) -> f64 {
        -self.log_det_precision()
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.pattern.num_pixels() {
            return Err(Error::usage(format!(
                "{what} has {} values, image has {} pixels",
                v.len(),
                self.pattern.num_pixels()
            )));
        }
        Ok(())
    }

    /// `L^T r`, scattering each row's entries onto their columns.
    pub fn apply_transpose(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_len(r, "residual")?;
        let mut y = vec![0.0; r.len()];
        let cols = self.pattern.cols();
        for (p, rp) in r.iter().enumerate() {
            for e in self.pattern.row_range(p) {
                y[cols[e]] += self.entry(e) * rp;
            }
        }
        Ok(y)
    }

    /// `r^T L L^T r = ||L^T r||^2`
    pub fn quad_form(&self, r: &[f64]) -> Result<f64> {
        Ok(self.apply_transpose(r)?.iter().map(|v| v * v).sum())
    }

    /// Gaussian log-density of `x` with mean `mu` and precision `LL^T`.
    pub fn log_prob(&self, mu: &[f64], x: &[f64]) -> Result<f64> {
        self.check_len(mu, "mean")?;
        self.check_len(x, "sample")?;
        let r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        let n_p = r.len() as f64;
        let lp = 0.5 * self.log_det_precision() - 0.5 * self.quad_form(&r)? - 0.5 * n_p * (2.0 * PI).ln();
        if !lp.is_finite() {
            return Err(Error::numeric("log_prob", "non-finite log-density"));
        }
        Ok(lp)
    }

    /// Solves `L^T e = v` by back-substitution in reverse raster order.
    pub fn solve_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v, "right-hand side")?;
        let mut acc = v.to_vec();
        let cols = self.pattern.cols();
        for p in (0..acc.len()).rev() {
            let d = self.diag(p);
            if !(d > 0.0) {
                return Err(Error::numeric("sample", format!("zero diagonal at pixel {p}")));
            }
            let ep = acc[p] / d;
            acc[p] = ep;
            let row = self.pattern.row_range(p);
            // all but the trailing diagonal entry
            for e in row.start..row.end - 1 {
                acc[cols[e]] -= self.coeffs[e] * ep;
            }
        }
        Ok(acc)
    }

    /// Draws `mu + e` with `e ~ N(0, (LL^T)^-1)`.
    pub fn sample(&self, mu: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.check_len(mu, "mean")?;
        let nu: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = self.solve_transpose(&nu)?;
        Ok(mu.iter().zip(eps).map(|(m, e)| m + e).collect())
    }

    pub fn to_dense(&self) -> Result<DenseFactor> {
        let n = self.pattern.num_pixels();
        if n > MAX_DENSE_DIM {
            return Err(Error::usage(format!(
                "to_dense on {n} pixels exceeds the {MAX_DENSE_DIM}-pixel guard"
            )));
        }
        let mut lower = DenseMatrix::zeros(n)?;
        let cols = self.pattern.cols();
        for p in 0..n {
            for e in self.pattern.row_range(p) {
                lower.set(p, cols[e], self.entry(e));
            }
        }
        let precision = lower.matmul(&lower.transpose());
        let covariance = spd_inverse(&precision)?;
        Ok(DenseFactor {
            lower,
            precision,
            covariance,
        })
    }

    pub fn to_dense_gaussian(&self, mean: &[f64]) -> Result<DenseGaussian> {
        self.check_len(mean, "mean")?;
        Ok(DenseGaussian {
            mean: mean.to_vec(),
            precision: self.to_dense()?.precision,
        })
    }

    /// Versioned little-endian block: magic, version, geometry, count, coefficients.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.coeffs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.pattern.height(),
            self.pattern.width(),
            self.pattern.patch_size(),
            self.pattern.dilation(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.coeffs.len() as u64).to_le_bytes());
        for c in &self.coeffs {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Parses a block written by [`PackedCholesky::to_bytes`]; returns it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let fail = |m: &str| Error::Format(format!("packed factor: {m}"));
        if bytes.len() < 32 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let (h, w, nf, dil) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let count = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")) as usize;
        let end = 32 + count * 8;
        if bytes.len() < end {
            return Err(fail("truncated payload"));
        }
        let pattern = SparsityPattern::new(h as usize, w as usize, nf as usize, dil as usize)?;
        if pattern.nnz() != count {
            return Err(fail("coefficient count does not match pattern"));
        }
        let coeffs = bytes[32..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::from_raw(Arc::new(pattern), coeffs)?, end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pat(h: usize, w: usize) -> Arc<SparsityPattern> {
        Arc::new(SparsityPattern::new(h, w, 3, 1).unwrap())
    }

    fn random_factor(p: Arc<SparsityPattern>, seed: u64) -> PackedCholesky {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..p.nnz())
            .map(|e| if p.slots()[e] == 0 { rng.gen_range(-0.3..0.5) } else { rng.gen_range(-0.6..0.6) })
            .collect();
        PackedCholesky::from_raw(p, coeffs).unwrap()
    }

    #[test]
    fn identity_log_det_is_zero() {
        assert_eq!(PackedCholesky::identity(pat(2, 2)).log_det_precision(), 0.0);
    }

    #[test]
    fn constant_diagonal_log_det() {
        let l = PackedCholesky::scaled_identity(pat(1, 3), 2.0);
        assert!((l.log_det_precision() - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.log_det_precision() - 4.158883).abs() < 1e-6);
        assert_eq!(l.log_det_precision() + l.log_det_covariance(), 0.0);
    }

    #[test]
    fn quad_form_special_cases() {
        let l = PackedCholesky::identity(pat(2, 2));
        assert_eq!(l.quad_form(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(l.quad_form(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 1.0 + 4.0 + 9.0 + 0.25);
        assert!(matches!(l.quad_form(&[1.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn log_prob_closed_forms() {
        let l = PackedCholesky::identity(pat(2, 2));
        let lp = l.log_prob(&[0.5; 4], &[0.5; 4]).unwrap();
        assert!((lp + 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp + 3.675754).abs() < 1e-6);

        let l = PackedCholesky::scaled_identity(pat(1, 1), 2.0);
        let lp = l.log_prob(&[1.0], &[1.0]).unwrap();
        assert!((lp - (2f64.ln() - 0.5 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((lp + 0.225791).abs() < 1e-6);
    }

    #[test]
    fn non_positive_diagonal_entries_rejected() {
        let p = pat(1, 2);
        let mut entries = vec![1.0; p.nnz()];
        entries[p.diag_index(1)] = 0.0;
        match PackedCholesky::from_entries(p, &entries) {
            Err(Error::Numeric { detail, .. }) => assert!(detail.contains("pixel 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_scattered_two_by_two() {
        let p = pat(2, 2);
        // rows: [0] ; [0,1] ; [0,1,2] ; [0,1,2,3]
        let entries = [2.0, 0.1, 3.0, 0.2, 0.3, 4.0, 0.4, 0.5, 0.6, 5.0];
        let l = PackedCholesky::from_entries(p, &entries).unwrap();
        let d = l.to_dense().unwrap();
        let expected = [
            [2.0, 0.0, 0.0, 0.0],
            [0.1, 3.0, 0.0, 0.0],
            [0.2, 0.3, 4.0, 0.0],
            [0.4, 0.5, 0.6, 5.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((d.lower.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dense_views_are_consistent() {
        let l = random_factor(pat(3, 3), 1);
        let d = l.to_dense().unwrap();
        assert!(d.precision.max_asymmetry() < 1e-12);
        super::super::dense::cholesky(&d.precision).unwrap();
        let eye = DenseMatrix::identity(9).unwrap();
        assert!(d.precision.matmul(&d.covariance).sub(&eye).frobenius() < 1e-9);

        let id = PackedCholesky::identity(pat(2, 2)).to_dense().unwrap();
        assert_eq!(id.lower, DenseMatrix::identity(4).unwrap());
        assert_eq!(id.covariance, DenseMatrix::identity(4).unwrap());
    }

    #[test]
    fn back_substitution_inverts_transpose() {
        let l = random_factor(pat(4, 3), 7);
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let e = l.solve_transpose(&v).unwrap();
        let back = l.apply_transpose(&e).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let l = random_factor(pat(3, 3), 2);
        let mu = vec![0.0; 9];
        let a = l.sample(&mu, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = l.sample(&mu, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_round_trip_is_byte_exact() {
        let l = random_factor(Arc::new(SparsityPattern::new(5, 4, 5, 2).unwrap()), 3);
        let bytes = l.to_bytes();
        let (back, used) = PackedCholesky::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, l);
        assert_eq!(back.to_bytes(), bytes);
        assert!(PackedCholesky::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn to_dense_size_guard() {
        let big = Arc::new(SparsityPattern::new(65, 64, 3, 1).unwrap());
        let l = PackedCholesky::identity(big);
        assert!(matches!(l.to_dense(), Err(Error::Usage(_))));
    }
}
