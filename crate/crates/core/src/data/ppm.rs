use std::path::Path;

use super::io::{atomic_write, read_file, Cursor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// 8-bit RGB raster, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(2, "magic")?;
    if magic != b"P6" {
        return Err(Error::format(0, "not a binary PPM (expected P6)"));
    }
    let width = header_number(&mut cur)?;
    let height = header_number(&mut cur)?;
    let maxval = header_number(&mut cur)?;
    if maxval != 255 {
        return Err(Error::format(cur.pos, format!("unsupported maxval {maxval}")));
    }
    match cur.u8("header terminator")? {
        b if b.is_ascii_whitespace() => {}
        _ => return Err(Error::format(cur.pos - 1, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::format(cur.pos, "empty image"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::format(cur.pos, "image dimensions overflow"))?;
    let pixels = cur.take(len, "pixel data")?.to_vec();
    if cur.remaining() != 0 {
        return Err(Error::format(cur.pos, "trailing bytes after pixel data"));
    }
    Ok(Rgb8 { width, height, pixels })
}

fn header_number(cur: &mut Cursor) -> Result<usize> {
    loop {
        match cur.peek() {
            Some(b'#') => {
                while let Some(b) = cur.peek() {
                    cur.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            Some(_) => break,
            None => return Err(Error::format(cur.pos, "truncated header")),
        }
    }
    let start = cur.pos;
    let mut v: usize = 0;
    while let Some(b) = cur.peek().filter(u8::is_ascii_digit) {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| Error::format(start, "header number overflow"))?;
        cur.pos += 1;
    }
    if cur.pos == start {
        return Err(Error::format(start, "expected a decimal number"));
    }
    Ok(v)
}

pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// `[3, h, w]` image in `[-1, 1]` to an 8-bit raster.
pub fn image_to_rgb8<T: Scalar>(img: &Tensor<T>) -> Result<Rgb8> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected a [3, h, w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = img.data();
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            pixels.push(to_u8(d[c * plane + p].as_f64()));
        }
    }
    Ok(Rgb8 { width: w, height: h, pixels })
}

pub fn rgb8_to_image<T: Scalar>(img: &Rgb8) -> Tensor<T> {
    let plane = img.width * img.height;
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = T::of(from_u8(img.pixels[3 * p + c]));
        }
    }
    Tensor::new(vec![3, img.height, img.width], data).expect("rgb")
}

pub fn save_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    atomic_write(path, &encode_ppm(&image_to_rgb8(img)?))
}

pub fn load_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(rgb8_to_image(&load_rgb8(path)?))
}

pub fn save_rgb8(path: &Path, img: &Rgb8) -> Result<()> {
    atomic_write(path, &encode_ppm(img))
}

pub fn load_rgb8(path: &Path) -> Result<Rgb8> {
    decode_ppm(&read_file(path)?).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x00\x01\x02\x03\x04\x05";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(Error::Format { offset: 0, .. })));
        match decode_ppm(b"P6\n2 2\n255\n\x00\x01") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn quantisation_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(from_u8(0), -1.0);
        assert_eq!(from_u8(255), 1.0);
        assert_eq!(to_u8(3.0), 255);
    }
}
