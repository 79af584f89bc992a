//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape, Tensor};

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    payload: usize,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(pos) {
                    pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => return pos,
        }
    }
}

fn read_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(format_err(start, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value = text.parse().map_err(|_| format_err(start, format!("{what} `{text}` is out of range")))?;
    Ok((value, end))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let (width, pos) = read_number(bytes, 2, "width")?;
    let (height, pos) = read_number(bytes, pos, "height")?;
    let (maxval, pos) = read_number(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(format_err(pos, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, format!("empty image {width}x{height}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(format_err(pos, "expected one whitespace byte after maxval")),
    }
    Ok(Header {
        width,
        height,
        payload: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.payload;
    if have < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(format_err(header.payload + need, format!("{} trailing bytes after payload", have - need)));
    }
    Ok(&bytes[header.payload..])
}

/// RGB image as a 1×3×H×W tensor scaled to [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?;
    let (h, w) = (header.height, header.width);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        f32::from(data[(y * w + x) * 3 + c]) / 255.0
    }))
}

/// Quantizes to bytes with rounding; values are clamped to [0, 1].
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid("encode_ppm", format!("expected a 1x3xHxW image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Gray bytes as a 1×1×H×W label map.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let header = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?;
    Mask::from_vec(1, header.height, header.width, data.to_vec())
}

pub fn encode_pgm(mask: &Mask) -> Result<Vec<u8>> {
    let s = mask.shape();
    if s.n != 1 {
        return Err(Error::invalid("encode_pgm", format!("expected a single mask, got {s}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend_from_slice(mask.data());
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    with_path(path, decode_ppm(&read(path)?))
}

pub fn load_pgm(path: &Path) -> Result<Mask> {
    with_path(path, decode_pgm(&read(path)?))
}

pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

pub fn save_pgm(path: &Path, mask: &Mask) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(mask)?)?)
}
