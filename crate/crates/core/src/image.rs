//! Netpbm (PGM/PPM) reading and PGM writing.

use std::fs;
use std::path::Path;

use crate::error::{input, Error, Result};
use crate::tensor::Tensor;

/// Reads P2/P3/P5/P6 into a tensor with samples scaled to `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format {
        what: "netpbm",
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        _ => return Err(bad("not a PGM/PPM file")),
    };
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 || width == 0 || height == 0 {
        return Err(bad("bad header values"));
    }
    let n = width * height * channels;
    let samples: Vec<usize> = if magic == "P2" || magic == "P3" {
        (0..n)
            .map(|_| token().and_then(num))
            .collect::<Result<_>>()?
    } else {
        // single whitespace byte separates header and raster
        let start = pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        if bytes.len() < start + need {
            return Err(bad("truncated raster"));
        }
        let raster = &bytes[start..start + need];
        if wide {
            raster
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
                .collect()
        } else {
            raster.iter().map(|&b| b as usize).collect()
        }
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    let maxval = maxval as f32;
    Ok(Tensor::from_fn(channels, height, width, |c, y, x| {
        samples[(y * width + x) * channels + c] as f32 / maxval
    }))
}

/// Averages channels into one plane.
pub fn to_grayscale(t: &Tensor) -> Tensor {
    if t.channels() == 1 {
        return t.clone();
    }
    let k = 1.0 / t.channels() as f32;
    Tensor::from_fn(1, t.height(), t.width(), |_, y, x| {
        (0..t.channels()).map(|c| t.at(c, y, x)).sum::<f32>() * k
    })
}

/// Encodes an 8-bit binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return input(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Quantizes a single-channel tensor in `[0, 1]` into a P5 file.
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let px: Vec<u8> = t
        .plane(0)
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(path, encode_pgm(t.width(), t.height(), &px)?)?;
    Ok(())
}
