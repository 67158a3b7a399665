//! Full-range BT.601 RGB/YCbCr conversion and chroma resampling.
//!
//! Values live in `[0, 255]`. Luma keeps full resolution; the two chroma
//! planes can be area-averaged down by an integer factor and brought back
//! with bilinear interpolation.

use crate::error::{Error, Result};

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
pub const CB_SCALE: f64 = 0.564;
pub const CR_SCALE: f64 = 0.713;
pub const CHROMA_OFFSET: f64 = 128.0;

/// One image channel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::config(format!(
                "plane {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn clamped(&self) -> Plane {
        self.map(|v| v.clamp(0.0, 255.0))
    }

    pub fn flip_horizontal(&self) -> Plane {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Mean of each `factor x factor` block.
    pub fn block_mean(&self, factor: usize) -> Result<Plane> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::config(format!(
                "{}x{} plane is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f64;
        let mut data = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                data[(y / factor) * w + x / factor] += self.get(y, x);
            }
        }
        data.iter_mut().for_each(|v| *v /= norm);
        Plane::new(h, w, data)
    }

    /// Bilinear upsampling by `factor` with pixel-centre alignment; the two
    /// nearest samples are extrapolated linearly past the border.
    pub fn bilinear_up(&self, factor: usize) -> Plane {
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let coords = |out: usize, n: usize| -> (usize, usize, f64) {
            let pos = (out as f64 + 0.5) / factor as f64 - 0.5;
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (pos.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, pos - i0 as f64)
        };
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let (y0, y1, ty) = coords(y, self.height);
            for x in 0..w {
                let (x0, x1, tx) = coords(x, self.width);
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        Plane {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub r: Plane,
    pub g: Plane,
    pub b: Plane,
}

impl RgbImage {
    pub fn new(r: Plane, g: Plane, b: Plane) -> Result<Self> {
        let dims = (r.height, r.width);
        if (g.height, g.width) != dims || (b.height, b.width) != dims {
            return Err(Error::config("RGB planes differ in size"));
        }
        if [&r, &g, &b].iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("RGB image contains non-finite values"));
        }
        Ok(RgbImage { r, g, b })
    }

    pub fn height(&self) -> usize {
        self.r.height
    }

    pub fn width(&self) -> usize {
        self.r.width
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        RgbImage {
            r: self.r.flip_horizontal(),
            g: self.g.flip_horizontal(),
            b: self.b.flip_horizontal(),
        }
    }
}

/// Luma at full resolution, chroma reduced by `factor` in each direction.
#[derive(Clone, Debug, PartialEq)]
pub struct YccImage {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
    pub factor: usize,
}

impl YccImage {
    pub fn new(y: Plane, cb: Plane, cr: Plane, factor: usize) -> Result<Self> {
        if factor == 0 || y.height % factor != 0 || y.width % factor != 0 {
            return Err(Error::config(format!(
                "luma {}x{} not divisible by chroma factor {factor}",
                y.height, y.width
            )));
        }
        let dims = (y.height / factor, y.width / factor);
        if (cb.height, cb.width) != dims || (cr.height, cr.width) != dims {
            return Err(Error::config(format!(
                "chroma planes must be {}x{} for factor {factor}",
                dims.0, dims.1
            )));
        }
        Ok(YccImage { y, cb, cr, factor })
    }

    pub fn height(&self) -> usize {
        self.y.height
    }

    pub fn width(&self) -> usize {
        self.y.width
    }

    pub fn flip_horizontal(&self) -> YccImage {
        YccImage {
            y: self.y.flip_horizontal(),
            cb: self.cb.flip_horizontal(),
            cr: self.cr.flip_horizontal(),
            factor: self.factor,
        }
    }
}

pub fn rgb_to_ycbcr(img: &RgbImage) -> YccImage {
    let n = img.r.data.len();
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (r, g, b) = (img.r.data[i], img.g.data[i], img.b.data[i]);
        let luma = KR * r + KG * g + KB * b;
        y.push(luma.clamp(0.0, 255.0));
        cb.push((CHROMA_OFFSET + (b - luma) * CB_SCALE).clamp(0.0, 255.0));
        cr.push((CHROMA_OFFSET + (r - luma) * CR_SCALE).clamp(0.0, 255.0));
    }
    let (h, w) = (img.height(), img.width());
    YccImage {
        y: Plane { height: h, width: w, data: y },
        cb: Plane { height: h, width: w, data: cb },
        cr: Plane { height: h, width: w, data: cr },
        factor: 1,
    }
}

pub fn ycbcr_to_rgb(img: &YccImage) -> Result<RgbImage> {
    if img.factor != 1 {
        return Err(Error::usage(format!(
            "ycbcr_to_rgb needs full-resolution chroma, got factor {}",
            img.factor
        )));
    }
    let n = img.y.data.len();
    let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let luma = img.y.data[i];
        let rv = luma + (img.cr.data[i] - CHROMA_OFFSET) / CR_SCALE;
        let bv = luma + (img.cb.data[i] - CHROMA_OFFSET) / CB_SCALE;
        let gv = (luma - KR * rv - KB * bv) / KG;
        r.push(rv.clamp(0.0, 255.0));
        g.push(gv.clamp(0.0, 255.0));
        b.push(bv.clamp(0.0, 255.0));
    }
    let (h, w) = (img.height(), img.width());
    Ok(RgbImage {
        r: Plane { height: h, width: w, data: r },
        g: Plane { height: h, width: w, data: g },
        b: Plane { height: h, width: w, data: b },
    })
}

/// Area-averages both chroma planes by a further `factor`.
pub fn downsample_chroma(img: &YccImage, factor: usize) -> Result<YccImage> {
    let cb = img.cb.block_mean(factor)?;
    let cr = img.cr.block_mean(factor)?;
    YccImage::new(img.y.clone(), cb, cr, img.factor * factor)
}

/// Bilinear chroma upsampling back to full resolution; `factor` must equal the image's.
pub fn upsample_chroma(img: &YccImage, factor: usize) -> Result<YccImage> {
    if factor != img.factor {
        return Err(Error::usage(format!(
            "upsample factor {factor} does not match subsample factor {}",
            img.factor
        )));
    }
    Ok(YccImage {
        y: img.y.clone(),
        cb: img.cb.bilinear_up(factor).clamped(),
        cr: img.cr.bilinear_up(factor).clamped(),
        factor: 1,
    })
}

/// Chroma subsample factor for square inputs: `size / 16`, at least 1.
pub fn chroma_factor_for(size: usize) -> usize {
    (size / 16).max(1)
}
