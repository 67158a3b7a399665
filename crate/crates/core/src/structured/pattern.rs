use crate::error::{Error, Result};

/// Non-zero layout of a lower-triangular factor over an image grid.
///
/// Row `p` of the factor (pixels in raster order) holds entries for every
/// pixel `q <= p` inside the (dilated) `n_f x n_f` patch centred on `p`.
/// Each row is stored with strictly increasing columns, so the diagonal
/// entry comes last. Every entry also carries a *slot*: its position in the
/// dense per-pixel column vector of length `(n_f^2 - 1)/2 + 1` used by the
/// basis expansion, where slot 0 is the diagonal and slots `1..` are the
/// preceding patch positions in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    height: usize,
    width: usize,
    patch_size: usize,
    dilation: usize,
    slot_offsets: Vec<(isize, isize)>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    slots: Vec<usize>,
}

const MAX_REACH: usize = 1 << 12;

impl SparsityPattern {
    pub fn new(height: usize, width: usize, patch_size: usize, dilation: usize) -> Result<Self> {
        if patch_size == 0 || patch_size % 2 == 0 {
            return Err(Error::config(format!("patch size must be odd and >= 1, got {patch_size}")));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be >= 1"));
        }
        if height == 0 || width == 0 {
            return Err(Error::config(format!("empty image {height}x{width}")));
        }
        let radius = patch_size / 2;
        if radius * dilation > MAX_REACH {
            return Err(Error::config(format!(
                "patch {patch_size} with dilation {dilation} reaches beyond {MAX_REACH} pixels"
            )));
        }
        let r = radius as isize;
        let d = dilation as isize;
        let mut slot_offsets = vec![(0isize, 0isize)];
        for dy in -r..=0 {
            for dx in -r..=r {
                if dy < 0 || dx < 0 {
                    slot_offsets.push((dy * d, dx * d));
                }
            }
        }

        let n_p = height * width;
        let mut row_start = Vec::with_capacity(n_p + 1);
        let mut cols = Vec::new();
        let mut slots = Vec::new();
        for y in 0..height as isize {
            for x in 0..width as isize {
                row_start.push(cols.len());
                for (k, &(dy, dx)) in slot_offsets.iter().enumerate().skip(1) {
                    let (qy, qx) = (y + dy, x + dx);
                    if qy >= 0 && qx >= 0 && qy < height as isize && qx < width as isize {
                        cols.push(qy as usize * width + qx as usize);
                        slots.push(k);
                    }
                }
                cols.push(y as usize * width + x as usize);
                slots.push(0);
            }
        }
        row_start.push(cols.len());
        Ok(SparsityPattern {
            height,
            width,
            patch_size,
            dilation,
            slot_offsets,
            row_start,
            cols,
            slots,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Length of a full (untruncated) row: `(n_f^2 - 1)/2 + 1`.
    pub fn num_slots(&self) -> usize {
        self.slot_offsets.len()
    }

    /// `(dy, dx)` pixel displacement of each slot, dilation applied.
    pub fn slot_offsets(&self) -> &[(isize, isize)] {
        &self.slot_offsets
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Entry range of row `p` inside the flat column/slot arrays.
    pub fn row_range(&self, p: usize) -> std::ops::Range<usize> {
        self.row_start[p]..self.row_start[p + 1]
    }

    /// Columns of row `p`, strictly increasing and ending with `p`.
    pub fn offsets(&self, p: usize) -> &[usize] {
        &self.cols[self.row_range(p)]
    }

    pub fn row_slots(&self, p: usize) -> &[usize] {
        &self.slots[self.row_range(p)]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Index of the diagonal entry of row `p` in the flat arrays.
    pub fn diag_index(&self, p: usize) -> usize {
        self.row_start[p + 1] - 1
    }
}
