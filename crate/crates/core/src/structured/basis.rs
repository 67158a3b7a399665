use std::sync::Arc;

use super::packed::PackedCholesky;
use super::pattern::SparsityPattern;
use crate::error::{Error, Result};

/// Shared basis `B`, `num_slots x num_basis`, row-major. Row 0 feeds the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    num_slots: usize,
    num_basis: usize,
    data: Vec<f64>,
}

/// Per-pixel weights `W`, `num_basis x num_pixels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    num_basis: usize,
    num_pixels: usize,
    data: Vec<f64>,
}

impl BasisMatrix {
    pub fn new(num_slots: usize, num_basis: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_slots * num_basis || num_basis == 0 {
            return Err(Error::config(format!(
                "basis {num_slots}x{num_basis} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("basis", "non-finite basis entry"));
        }
        Ok(BasisMatrix {
            num_slots,
            num_basis,
            data,
        })
    }

    pub fn identity(num_slots: usize) -> Self {
        let mut data = vec![0.0; num_slots * num_slots];
        for i in 0..num_slots {
            data[i * num_slots + i] = 1.0;
        }
        BasisMatrix {
            num_slots,
            num_basis: num_slots,
            data,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn get(&self, slot: usize, b: usize) -> f64 {
        self.data[slot * self.num_basis + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Basis column `b` laid out as an `n_f x n_f` kernel; the diagonal and
    /// following positions are zero. Tap `(ky, kx)` acts at displacement
    /// `((ky - r) * dilation, (kx - r) * dilation)`.
    pub fn kernel(&self, b: usize, pattern: &SparsityPattern) -> Vec<f64> {
        let nf = pattern.patch_size();
        let r = (nf / 2) as isize;
        let d = pattern.dilation() as isize;
        let mut k = vec![0.0; nf * nf];
        for (slot, &(dy, dx)) in pattern.slot_offsets().iter().enumerate().skip(1) {
            let ky = (dy / d + r) as usize;
            let kx = (dx / d + r) as usize;
            k[ky * nf + kx] = self.get(slot, b);
        }
        k
    }
}

impl WeightField {
    pub fn new(num_basis: usize, num_pixels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_basis * num_pixels {
            return Err(Error::config(format!(
                "weight field {num_basis}x{num_pixels} with {} values",
                data.len()
            )));
        }
        Ok(WeightField {
            num_basis,
            num_pixels,
            data,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn num_pixels(&self) -> usize {
        self.num_pixels
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.num_pixels..(b + 1) * self.num_pixels]
    }
}

fn check_conformance(basis: &BasisMatrix, weights: &WeightField, pattern: &SparsityPattern) -> Result<()> {
    if basis.num_slots() != pattern.num_slots()
        || basis.num_basis() != weights.num_basis()
        || weights.num_pixels() != pattern.num_pixels()
    {
        return Err(Error::config(format!(
            "basis {}x{}, weights {}x{}, pattern {} slots x {} pixels",
            basis.num_slots(),
            basis.num_basis(),
            weights.num_basis(),
            weights.num_pixels(),
            pattern.num_slots(),
            pattern.num_pixels()
        )));
    }
    Ok(())
}

/// Dense slot-major product `BW`, `[num_slots][num_pixels]`.
pub fn basis_product(basis: &BasisMatrix, weights: &WeightField) -> Vec<f64> {
    let n_p = weights.num_pixels();
    let mut out = vec![0.0; basis.num_slots() * n_p];
    for k in 0..basis.num_slots() {
        let orow = &mut out[k * n_p..(k + 1) * n_p];
        for b in 0..basis.num_basis() {
            let c = basis.get(k, b);
            if c == 0.0 {
                continue;
            }
            for (o, w) in orow.iter_mut().zip(weights.row(b)) {
                *o += c * w;
            }
        }
    }
    out
}

/// `L = s(BW)`: row 0 of `BW` is mapped through `exp` onto the diagonal, the
/// remaining rows are scattered to the pattern; entries a truncated boundary
/// row does not have are dropped.
pub fn expand_basis(
    basis: &BasisMatrix,
    weights: &WeightField,
    pattern: Arc<SparsityPattern>,
) -> Result<PackedCholesky> {
    check_conformance(basis, weights, &pattern)?;
    let bw = basis_product(basis, weights);
    let n_p = pattern.num_pixels();
    for p in 0..n_p {
        let d = bw[p].exp();
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::numeric(
                "expand_basis",
                format!("diagonal {d} at pixel {p} is not positive and finite"),
            ));
        }
    }
    PackedCholesky::from_slots(pattern, &bw)
}

/// `||L^T r||^2` for `L = s(BW)` without materialising `L`: every basis
/// kernel is applied (as a transposed, dilated convolution) to the
/// weight-modulated residual `W_b * r`, and the diagonal contribution
/// `exp((BW)_0) * r` is added on top.
pub fn quad_form_basis(
    basis: &BasisMatrix,
    weights: &WeightField,
    pattern: &SparsityPattern,
    residual: &[f64],
) -> Result<f64> {
    check_conformance(basis, weights, pattern)?;
    let (h, w) = (pattern.height(), pattern.width());
    if residual.len() != h * w {
        return Err(Error::usage(format!(
            "residual has {} values, image has {} pixels",
            residual.len(),
            h * w
        )));
    }
    let nf = pattern.patch_size();
    let r = (nf / 2) as isize;
    let d = pattern.dilation() as isize;
    let mut y = vec![0.0; h * w];
    let mut modulated = vec![0.0; h * w];
    for b in 0..basis.num_basis() {
        let kernel = basis.kernel(b, pattern);
        for ((m, wv), rv) in modulated.iter_mut().zip(weights.row(b)).zip(residual) {
            *m = wv * rv;
        }
        for ky in 0..nf {
            for kx in 0..nf {
                let k = kernel[ky * nf + kx];
                if k == 0.0 {
                    continue;
                }
                let dy = (ky as isize - r) * d;
                let dx = (kx as isize - r) * d;
                for py in 0..h as isize {
                    let qy = py + dy;
                    if qy < 0 || qy >= h as isize {
                        continue;
                    }
                    for px in 0..w as isize {
                        let qx = px + dx;
                        if qx < 0 || qx >= w as isize {
                            continue;
                        }
                        y[qy as usize * w + qx as usize] += k * modulated[py as usize * w + px as usize];
                    }
                }
            }
        }
    }
    for p in 0..h * w {
        let diag_raw: f64 = (0..basis.num_basis()).map(|b| basis.get(0, b) * weights.row(b)[p]).sum();
        y[p] += diag_raw.exp() * residual[p];
    }
    Ok(y.iter().map(|v| v * v).sum())
}
