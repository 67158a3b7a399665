//! Binary PGM (P5) and PPM (P6) with a maximum value of 255.

use std::fs;
use std::path::Path;

use crate::color::{Plane, RgbImage};
use crate::error::{Error, Result};

/// A decoded file: grayscale images come back with three equal planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub image: RgbImage,
    pub grayscale: bool,
}

fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        match bytes.get(i) {
            None => return Err(Error::Format("truncated PNM header".into())),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(i) {
        Some(c) if c.is_ascii_whitespace() => Ok((tokens, i + 1)),
        _ => Err(Error::Format("missing whitespace after PNM header".into())),
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let (tokens, offset) = header_tokens(bytes)?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Format(format!("invalid PNM dimension {s:?}")))
    };
    let (width, height) = (dim(&tokens[1])?, dim(&tokens[2])?);
    if tokens[3] != "255" {
        return Err(Error::Format(format!("maximum value {} is not 255", tokens[3])));
    }
    let n = width * height;
    let raster = &bytes[offset..];
    if raster.len() < n * channels {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            n * channels
        )));
    }
    let plane = |c: usize| Plane {
        height,
        width,
        data: (0..n).map(|i| raster[i * channels + c] as f64).collect(),
    };
    let image = if channels == 1 {
        let p = plane(0);
        RgbImage { r: p.clone(), g: p.clone(), b: p }
    } else {
        RgbImage { r: plane(0), g: plane(1), b: plane(2) }
    };
    Ok(PnmImage { image, grayscale: channels == 1 })
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

pub fn encode_pgm(plane: &Plane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.data.iter().map(|v| quantize(*v)));
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for i in 0..img.r.data.len() {
        out.extend([img.r.data[i], img.g.data[i], img.b.data[i]].map(quantize));
    }
    out
}

/// Writes a plane as PGM, clamping to `[0, 255]` and rounding.
pub fn write_pgm(path: &Path, plane: &Plane) -> Result<()> {
    fs::write(path, encode_pgm(plane)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
