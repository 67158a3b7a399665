//! Randomised self-checks of the structured likelihood against dense linear
//! algebra, of its sampler against the analytic covariance, and of the full
//! loss gradient against finite differences.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{Plane, YccImage};
use crate::error::Result;
use crate::gradcheck::{gradient_check, GradCheckOptions};
use crate::model::{latent_noise, Batch, ColorMode, Likelihood, Model, ModelConfig};
use crate::structured::dense::spd_log_det;
use crate::structured::{PackedCholesky, SparsityPattern};

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the sparse log-determinant before comparing.
    LogDetSign,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest error seen per compared quantity.
    pub max_errors: Vec<(&'static str, f64)>,
    pub tolerance: f64,
    /// One line per failing case, with its seed.
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} cases={} tol={:.0e}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases,
            self.tolerance
        )?;
        for (k, v) in &self.max_errors {
            write!(f, " max_{k}={v:.3e}")?;
        }
        write!(f, " ({:.2}s)", self.elapsed.as_secs_f64())?;
        for line in &self.failures {
            write!(f, "\n  {line}")?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    // values near zero are compared absolutely
    (a - b).abs() / b.abs().max(1.0)
}

/// A random well-conditioned factor on a random pattern of at most 8x8 pixels.
pub fn random_instance(rng: &mut impl Rng) -> Result<PackedCholesky> {
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let nf = if rng.gen_bool(0.5) { 3 } else { 5 };
    let dil = rng.gen_range(1..=2);
    let pattern = Arc::new(SparsityPattern::new(h, w, nf, dil)?);
    let coeffs = (0..pattern.nnz())
        .map(|e| {
            if pattern.slots()[e] == 0 {
                rng.gen_range(-0.5..0.5)
            } else {
                rng.gen_range(-0.15..0.15)
            }
        })
        .collect();
    PackedCholesky::from_raw(pattern, coeffs)
}

pub const DENSE_TOLERANCE: f64 = 1e-8;

/// Sparse `log_prob`, `quad_form` and `log_det_precision` against a dense
/// Cholesky of the materialised precision.
pub fn dense_equivalence(instances: usize, seed: u64, fault: Fault) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut max = [0.0f64; 3];
    let mut failures = Vec::new();
    for i in 0..instances {
        let case_seed = seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let l = random_instance(&mut rng)?;
        let n = l.pattern().num_pixels();
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = x.iter().zip(&mu).map(|(a, b)| a - b).collect();

        let dense = l.to_dense_gaussian(&mu)?;
        let want_logdet = spd_log_det(&dense.precision)?;
        let want_quad = dense.precision.quad(&r);
        let want_lp = dense.log_density(&x)?;

        let mut logdet = l.log_det_precision();
        let mut lp = l.log_prob(&mu, &x)?;
        if fault == Fault::LogDetSign {
            logdet = -logdet;
            lp -= l.log_det_precision();
        }
        let errs = [
            rel_err(lp, want_lp),
            rel_err(l.quad_form(&r)?, want_quad),
            rel_err(logdet, want_logdet),
        ];
        for (m, e) in max.iter_mut().zip(errs) {
            *m = m.max(e);
        }
        if errs.iter().any(|e| !(*e <= DENSE_TOLERANCE)) {
            let p = l.pattern();
            failures.push(format!(
                "instance {i} seed {case_seed} ({}x{}, n_f={}, dilation={}): log_prob {:.2e}, quad {:.2e}, log_det {:.2e}",
                p.height(),
                p.width(),
                p.patch_size(),
                p.dilation(),
                errs[0],
                errs[1],
                errs[2]
            ));
        }
    }
    Ok(SuiteResult {
        name: "dense-equivalence",
        cases: instances,
        max_errors: vec![("log_prob", max[0]), ("quad_form", max[1]), ("log_det", max[2])],
        tolerance: DENSE_TOLERANCE,
        failures,
        elapsed: start.elapsed(),
    })
}

pub const SAMPLING_TOLERANCE: f64 = 0.05;

/// Empirical covariance of `draws` samples on a 3x3 image against `(LL^T)^-1`,
/// as a relative Frobenius error.
pub fn sampling_covariance(draws: usize, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = Arc::new(SparsityPattern::new(3, 3, 3, 1)?);
    let coeffs = (0..pattern.nnz())
        .map(|e| if pattern.slots()[e] == 0 { rng.gen_range(0.0..0.5) } else { rng.gen_range(-0.6..0.6) })
        .collect();
    let l = PackedCholesky::from_raw(pattern, coeffs)?;
    let truth = l.to_dense()?.covariance;
    let n = 9;
    let mu = vec![0.0; n];
    let mut sum = vec![0.0; n];
    let mut outer = vec![0.0; n * n];
    for _ in 0..draws {
        let s = l.sample(&mu, &mut rng)?;
        for i in 0..n {
            sum[i] += s[i];
            for j in 0..n {
                outer[i * n + j] += s[i] * s[j];
            }
        }
    }
    let k = draws as f64;
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let cov = (outer[i * n + j] - sum[i] * sum[j] / k) / (k - 1.0);
            diff += (cov - truth.get(i, j)).powi(2);
            norm += truth.get(i, j).powi(2);
        }
    }
    let err = (diff / norm).sqrt();
    let failures = if err <= SAMPLING_TOLERANCE {
        Vec::new()
    } else {
        vec![format!("seed {seed}: relative Frobenius error {err:.4}")]
    };
    Ok(SuiteResult {
        name: "sampling-covariance",
        cases: 1,
        max_errors: vec![("frobenius", err)],
        tolerance: SAMPLING_TOLERANCE,
        failures,
        elapsed: start.elapsed(),
    })
}

/// The 8x8 colour configuration used for gradient checks.
pub fn toy_gradient_config(num_basis: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        color: ColorMode::YCbCr,
        chroma_factor: 2,
        latent_dim: 4,
        width: 4,
        levels: 2,
        hidden: 16,
        num_basis,
        likelihood: Likelihood::Structured,
        ..Default::default()
    }
}

fn toy_images(n: usize, factor: usize, rng: &mut impl Rng) -> Result<Vec<YccImage>> {
    (0..n)
        .map(|_| {
            let mut plane = |s: usize| Plane::new(s, s, (0..s * s).map(|_| rng.gen_range(30.0..225.0)).collect());
            let y = plane(8)?;
            let cb = plane(8 / factor)?;
            let cr = plane(8 / factor)?;
            YccImage::new(y, cb, cr, factor)
        })
        .collect()
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Central differences (`h = 1e-5`) of the full objective on the toy model,
/// with and without a covariance basis. `max_entries` limits the entries
/// probed per parameter tensor.
pub fn gradient_fidelity(seed: u64, max_entries: Option<usize>) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut max_errors = Vec::new();
    let mut cases = 0;
    for (label, nb) in [("direct", 0), ("basis", 3)] {
        let config = toy_gradient_config(nb);
        let model = Model::new(config.clone())?;
        let mut params = model.init_params(seed)?;
        // non-zero off-diagonal entries so the gamma term and L entries matter
        if let Some(b) = params.get_mut("cov.conv2.b") {
            b.value.data_mut().iter_mut().skip(1).for_each(|v| *v = 0.3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = toy_images(2, config.chroma_factor, &mut rng)?;
        let refs: Vec<&YccImage> = imgs.iter().collect();
        let batch = Batch::new(&refs, &config)?;
        let noise = latent_noise(2, config.latent_dim, &mut rng);
        let f = |tape: &mut crate::autograd::Tape, p: &crate::params::Bound| {
            Ok(model.loss(tape, p, &batch, &noise, Likelihood::Structured)?.total)
        };
        let opts = GradCheckOptions { step: 1e-5, tolerance: GRADIENT_TOLERANCE, max_entries, ..Default::default() };
        let report = gradient_check(&f, &params, &|_| true, &opts)?;
        for pc in &report.params {
            cases += pc.checked;
            if !pc.passed {
                failures.push(format!(
                    "{label} seed {seed}: {} entry {} relative error {:.3e}",
                    pc.name, pc.worst_index, pc.max_rel_error
                ));
            }
        }
        max_errors.push((if nb == 0 { "direct" } else { "basis" }, report.max_rel_error()));
    }
    Ok(SuiteResult {
        name: "gradient-fidelity",
        cases,
        max_errors,
        tolerance: GRADIENT_TOLERANCE,
        failures,
        elapsed: start.elapsed(),
    })
}

/// Every suite at its default size.
pub fn run_all(seed: u64, fault: Fault) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        dense_equivalence(200, seed, fault)?,
        sampling_covariance(100_000, seed)?,
        gradient_fidelity(seed, Some(24))?,
    ])
}
