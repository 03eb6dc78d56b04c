//! Binary PNM images: 8-bit P5/P6 input and 16-bit P5 disparity maps.

use std::path::Path;

use dgcrf_core::Tensor;

use crate::error::{read, write_atomic, Error, Result};

/// Fixed-point scale of stored disparities.
pub const DISPARITY_SCALE: f64 = 256.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

#[derive(Debug)]
pub struct PnmError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, PnmError> {
    Err(PnmError {
        offset,
        message: message.into(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

/// Parses a binary P5 or P6 image of any depth up to 16 bits.
pub fn decode(bytes: &[u8]) -> std::result::Result<Pnm, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', b'1'..=b'4']) => return fail(0, "ASCII and bitmap PNM variants are not supported"),
        _ => return fail(0, "not a binary PGM (P5) or PPM (P6) file"),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return fail(max_at, "zero image extent");
    }
    if maxval == 0 || maxval > 65535 {
        return fail(max_at, format!("maxval {maxval} outside 1..=65535"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return fail(c.pos, "missing whitespace after header"),
    }
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        return fail(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", raster.len()),
        );
    }
    let samples: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = samples.iter().position(|&s| s > maxval as u16) {
        return fail(c.pos + i * if wide { 2 } else { 1 }, "sample exceeds maxval");
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

fn format_err(path: &Path, e: PnmError) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset: e.offset,
        message: e.message,
    }
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    decode(&read(path)?).map_err(|e| format_err(path, e))
}

/// Loads an 8-bit P5/P6 image as `[C, H, W]` with values `sample / maxval`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.maxval > 255 {
        return Err(format_err(
            path,
            PnmError {
                offset: 0,
                message: format!("only 8-bit images are accepted, maxval is {}", img.maxval),
            },
        ));
    }
    Ok(to_tensor(&img))
}

pub fn to_tensor(img: &Pnm) -> Tensor {
    let (c, hw) = (img.channels, img.width * img.height);
    let scale = img.maxval as f64;
    let mut data = vec![0.0; c * hw];
    for (i, &s) in img.samples.iter().enumerate() {
        data[(i % c) * hw + i / c] = s as f64 / scale;
    }
    Tensor::new(&[c, img.height, img.width], data).expect("extent checked by decode")
}

/// `[C, H, W]` with `C` of 1 or 3 to an 8-bit image; values are clamped to
/// `[0, 1]` and rounded.
pub fn from_tensor(t: &Tensor) -> Result<Pnm> {
    let (c, h, w) = match t.shape() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        other => return Err(Error::Mismatch(format!("cannot store a {other:?} tensor as PNM"))),
    };
    let hw = h * w;
    let samples = (0..c * hw)
        .map(|i| (t.data()[(i % c) * hw + i / c].clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    Ok(Pnm {
        width: w,
        height: h,
        channels: c,
        maxval: 255,
        samples,
    })
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode(&from_tensor(t)?))
}

/// Stores a `[.., H, W]` disparity map as a 16-bit PGM of `round(d * 256)`.
pub fn save_disparity(path: &Path, d: &Tensor) -> Result<()> {
    let shape = d.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if d.len() != h * w {
        return Err(Error::Mismatch(format!("expected one disparity map, got shape {shape:?}")));
    }
    let img = Pnm {
        width: w,
        height: h,
        channels: 1,
        maxval: 65535,
        samples: d
            .data()
            .iter()
            .map(|v| (v * DISPARITY_SCALE).round().clamp(0.0, 65535.0) as u16)
            .collect(),
    };
    write_atomic(path, &encode(&img))
}

/// Reads a disparity PGM written by [`save_disparity`] as `[1, H, W]`.
pub fn load_disparity(path: &Path) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(Error::Mismatch(format!("{}: disparity maps must be P5", path.display())));
    }
    let data = img.samples.iter().map(|&s| s as f64 / DISPARITY_SCALE).collect();
    Ok(Tensor::new(&[1, img.height, img.width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let img = decode(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(to_tensor(&img).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray() {
        let img = decode(b"P5 1 1 255 \x80").unwrap();
        assert_eq!(to_tensor(&img).data(), &[128.0 / 255.0]);
    }

    #[test]
    fn comments_in_header() {
        let img = decode(b"P5\n# made by hand\n2 1\n# depth\n255\n\x01\x02").unwrap();
        assert_eq!(img.samples, vec![1, 2]);
    }

    #[test]
    fn rejects_ascii_and_truncation() {
        let e = decode(b"P3\n1 1\n255\n255 0 0\n").unwrap_err();
        assert_eq!(e.offset, 0);
        let e = decode(b"P6\n2 1\n255\n\x00\x00\x00").unwrap_err();
        assert_eq!(e.offset, 14);
        assert!(e.message.contains("truncated"));
        assert!(decode(b"P6\nx 1\n255\n").is_err());
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let img = Pnm {
            width: 3,
            height: 1,
            channels: 1,
            maxval: 65535,
            samples: vec![0, 1024, 65535],
        };
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn tensor_round_trip_is_lossless() {
        let img = Pnm {
            width: 2,
            height: 2,
            channels: 3,
            maxval: 255,
            samples: (0..12).map(|i| i * 20).collect(),
        };
        let back = from_tensor(&to_tensor(&img)).unwrap();
        assert_eq!(back, img);
    }
}
