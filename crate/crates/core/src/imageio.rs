//! Binary PPM (P6) and PGM (P5) files.

use std::path::Path;

use crate::data::scene::{to_byte, to_unit, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes an `H × W × 3` image in `[-1, 1]` as 8-bit P6.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        other => {
            return Err(Error::invalid(format!("ppm needs an HxWx3 image, got {other:?}")));
        }
    };
    if c != 3 {
        return Err(Error::invalid(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&x| to_byte(x)));
    Ok(out)
}

/// Encodes an `H × W` map in `[0, 1]` as 8-bit P5.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::invalid("pgm size mismatch"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Parse("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad netpbm field `{s}`")))
    };
    if num(&fields[3])? != 255 {
        return Err(Error::Parse("only 8-bit netpbm files are supported".into()));
    }
    Ok(Header {
        magic: fields[0].clone(),
        width: num(&fields[1])?,
        height: num(&fields[2])?,
        body: i,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    if h.magic != "P6" {
        return Err(Error::Parse(format!("expected P6, found {}", h.magic)));
    }
    let n = h.width * h.height * 3;
    let raster = bytes
        .get(h.body..h.body + n)
        .ok_or_else(|| Error::Parse("truncated ppm raster".into()))?;
    Tensor::new(vec![h.height, h.width, 3], raster.iter().map(|&p| to_unit(p)).collect())
}

/// Returns `(height, width, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if h.magic != "P5" {
        return Err(Error::Parse(format!("expected P5, found {}", h.magic)));
    }
    let n = h.width * h.height;
    let raster = bytes
        .get(h.body..h.body + n)
        .ok_or_else(|| Error::Parse("truncated pgm raster".into()))?;
    Ok((h.height, h.width, raster.to_vec()))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pgm(height, width, values)?).map_err(|e| Error::io(path, e))
}
