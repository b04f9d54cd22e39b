//! Plain-text and binary portable-map formats for samples, conditions and masks.
//!
//! Pixel values map linearly from `[-1, 1]` to `[0, 255]` and are clamped,
//! never rescaled per image.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::operators::ImageShape;

/// Shortest round-trip formatting, switching to exponent form for very large
/// or very small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// One row per vector, comma separated, under the given header.
pub fn write_csv_rows(out: &mut impl Write, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    if !header.is_empty() {
        writeln!(out, "{}", header.join(","))?;
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads numeric rows. A first line that does not parse as numbers is
/// treated as a header and skipped; every row must have the same width.
pub fn read_csv_rows(input: impl BufRead) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::Format(format!(
                            "line {}: expected {} columns, found {}",
                            i + 1,
                            first.len(),
                            row.len()
                        )));
                    }
                }
                rows.push(row);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Format(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(rows)
}

pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Writes a one-channel image as P5 or a three-channel image as P6.
pub fn write_pnm(out: &mut impl Write, shape: ImageShape, pixels: &[f64]) -> Result<()> {
    if pixels.len() != shape.len() {
        return Err(Error::DimensionMismatch {
            expected: shape.len(),
            got: pixels.len(),
        });
    }
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidParameter(format!("cannot encode {c}-channel image"))),
    };
    write!(out, "{magic}\n{} {}\n255\n", shape.width, shape.height)?;
    let bytes: Vec<u8> = pixels.iter().map(|&v| to_byte(v)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary P5/P6 file with maxval 255.
pub fn read_pnm(input: &mut impl Read) -> Result<(ImageShape, Vec<f64>)> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && (data[pos].is_ascii_whitespace() || data[pos] == b'#') {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported image magic '{other}'"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("bad header field '{s}': {e}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported")));
    }
    let shape = ImageShape::new(height, width, channels);
    let raster = data.get(pos..).unwrap_or(&[]);
    if raster.len() != shape.len() {
        return Err(Error::Format(format!(
            "expected {} raster bytes, found {}",
            shape.len(),
            raster.len()
        )));
    }
    Ok((shape, raster.iter().map(|&b| from_byte(b)).collect()))
}

/// Mask bitmap as P5: 255 observed, 0 hidden.
pub fn write_mask(out: &mut impl Write, height: usize, width: usize, observed: &[bool]) -> Result<()> {
    let pixels: Vec<f64> = observed.iter().map(|&o| if o { 1.0 } else { -1.0 }).collect();
    write_pnm(out, ImageShape::new(height, width, 1), &pixels)
}

pub fn read_mask(input: &mut impl Read) -> Result<(usize, usize, Vec<bool>)> {
    let (shape, px) = read_pnm(input)?;
    if shape.channels != 1 {
        return Err(Error::Format("mask must be a graymap".into()));
    }
    Ok((shape.height, shape.width, px.iter().map(|&v| v > 0.0).collect()))
}
