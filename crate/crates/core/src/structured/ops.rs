//! Differentiable structured-likelihood terms on a batch of slot tensors.
//!
//! Slot tensors have shape `[N, num_slots, H, W]`; slot 0 holds the log of
//! the diagonal of `L`, the other slots the off-diagonal entries of each row
//! (see [`SparsityPattern`]).

use std::sync::Arc;

use super::pattern::SparsityPattern;
use crate::autograd::CustomOp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_slots(pattern: &SparsityPattern, shape: &[usize]) -> Result<usize> {
    if shape.len() != 4
        || shape[1] != pattern.num_slots()
        || shape[2] != pattern.height()
        || shape[3] != pattern.width()
    {
        return Err(Error::config(format!(
            "slot tensor {shape:?} does not fit pattern with {} slots on {}x{}",
            pattern.num_slots(),
            pattern.height(),
            pattern.width()
        )));
    }
    Ok(shape[0])
}

/// Per-sample `||L^T r||^2`: inputs `(slots [N,m,H,W], residual [N,1,H,W])`, output `[N]`.
pub struct StructuredQuad {
    pattern: Arc<SparsityPattern>,
}

impl StructuredQuad {
    pub fn new(pattern: Arc<SparsityPattern>) -> Self {
        StructuredQuad { pattern }
    }

    /// `L^T r` for one sample.
    fn apply(&self, slots: &[f64], r: &[f64], y: &mut [f64]) {
        let pat = &self.pattern;
        let n_p = pat.num_pixels();
        let cols = pat.cols();
        let kinds = pat.slots();
        y.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..n_p {
            let rp = r[p];
            for e in pat.row_range(p) {
                let k = kinds[e];
                let raw = slots[k * n_p + p];
                let l = if k == 0 { raw.exp() } else { raw };
                y[cols[e]] += l * rp;
            }
        }
    }
}

impl CustomOp for StructuredQuad {
    fn name(&self) -> &'static str {
        "structured_quad"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [slots, resid] = inputs else {
            return Err(Error::usage("structured_quad takes (slots, residual)"));
        };
        let n = check_slots(&self.pattern, slots.shape())?;
        let n_p = self.pattern.num_pixels();
        if resid.len() != n * n_p {
            return Err(Error::config(format!(
                "residual {:?} does not match {n} images of {n_p} pixels",
                resid.shape()
            )));
        }
        let m = self.pattern.num_slots();
        let mut y = vec![0.0; n_p];
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            self.apply(
                &slots.data()[s * m * n_p..(s + 1) * m * n_p],
                &resid.data()[s * n_p..(s + 1) * n_p],
                &mut y,
            );
            out.push(y.iter().map(|v| v * v).sum());
        }
        Tensor::new(vec![n], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let (slots, resid) = (inputs[0], inputs[1]);
        let pat = &self.pattern;
        let n_p = pat.num_pixels();
        let m = pat.num_slots();
        let cols = pat.cols();
        let kinds = pat.slots();
        let mut g_slots = vec![0.0; slots.len()];
        let mut g_resid = vec![0.0; resid.len()];
        let mut y = vec![0.0; n_p];
        for (s, gs) in grad.iter().enumerate() {
            let sl = &slots.data()[s * m * n_p..(s + 1) * m * n_p];
            let r = &resid.data()[s * n_p..(s + 1) * n_p];
            self.apply(sl, r, &mut y);
            let gsl = &mut g_slots[s * m * n_p..(s + 1) * m * n_p];
            let gr = &mut g_resid[s * n_p..(s + 1) * n_p];
            for p in 0..n_p {
                let rp = r[p];
                for e in pat.row_range(p) {
                    let k = kinds[e];
                    let dy = 2.0 * gs * y[cols[e]];
                    let raw = sl[k * n_p + p];
                    let l = if k == 0 { raw.exp() } else { raw };
                    // d l / d raw is l itself on the exp-mapped diagonal
                    gsl[k * n_p + p] += dy * rp * if k == 0 { l } else { 1.0 };
                    gr[p] += dy * l;
                }
            }
        }
        vec![g_slots, g_resid]
    }
}

/// Per-sample sum of `|L_ij|` over the off-diagonal entries the pattern keeps.
pub struct OffDiagonalL1 {
    pattern: Arc<SparsityPattern>,
}

impl OffDiagonalL1 {
    pub fn new(pattern: Arc<SparsityPattern>) -> Self {
        OffDiagonalL1 { pattern }
    }
}

impl CustomOp for OffDiagonalL1 {
    fn name(&self) -> &'static str {
        "off_diagonal_l1"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [slots] = inputs else {
            return Err(Error::usage("off_diagonal_l1 takes (slots)"));
        };
        let n = check_slots(&self.pattern, slots.shape())?;
        let pat = &self.pattern;
        let (n_p, m) = (pat.num_pixels(), pat.num_slots());
        let out = (0..n)
            .map(|s| {
                let sl = &slots.data()[s * m * n_p..(s + 1) * m * n_p];
                (0..n_p)
                    .flat_map(|p| pat.row_slots(p).iter().filter(|&&k| k != 0).map(move |&k| sl[k * n_p + p].abs()))
                    .sum()
            })
            .collect();
        Tensor::new(vec![n], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let slots = inputs[0];
        let pat = &self.pattern;
        let (n_p, m) = (pat.num_pixels(), pat.num_slots());
        let mut g = vec![0.0; slots.len()];
        for (s, gs) in grad.iter().enumerate() {
            let base = s * m * n_p;
            for p in 0..n_p {
                for &k in pat.row_slots(p).iter().filter(|&&k| k != 0) {
                    let i = base + k * n_p + p;
                    g[i] += gs * slots.data()[i].signum();
                }
            }
        }
        vec![g]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::PackedCholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batched_quad_matches_packed_factor() {
        let pattern = Arc::new(SparsityPattern::new(4, 5, 3, 1).unwrap());
        let (n_p, m) = (pattern.num_pixels(), pattern.num_slots());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let slots: Vec<f64> = (0..2 * m * n_p).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let resid: Vec<f64> = (0..2 * n_p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let op = StructuredQuad::new(pattern.clone());
        let st = Tensor::new(vec![2, m, 4, 5], slots.clone()).unwrap();
        let rt = Tensor::new(vec![2, 1, 4, 5], resid.clone()).unwrap();
        let out = op.forward(&[&st, &rt]).unwrap();
        for s in 0..2 {
            let l = PackedCholesky::from_slots(pattern.clone(), &slots[s * m * n_p..(s + 1) * m * n_p]).unwrap();
            let q = l.quad_form(&resid[s * n_p..(s + 1) * n_p]).unwrap();
            assert!((out.data()[s] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_ignores_diagonal_and_dropped_slots() {
        let pattern = Arc::new(SparsityPattern::new(1, 2, 3, 1).unwrap());
        // pixel 0 keeps only its diagonal; pixel 1 keeps its left neighbour (slot 4)
        let mut slots = vec![-3.0; 5 * 2];
        slots[4 * 2 + 1] = -0.25;
        let t = Tensor::new(vec![1, 5, 1, 2], slots).unwrap();
        let out = OffDiagonalL1::new(pattern).forward(&[&t]).unwrap();
        assert_eq!(out.data(), &[0.25]);
    }
}
