//! Slice intensity normalization and binary PGM input/output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{GrayImage16, GrayImage8};

/// Reduce a 16-bit slice to 8 bits: negatives clamp to zero, then every pixel
/// scales by `255 / max(X)` where the maximum is taken over the original
/// pixels. Rounds half up. Images with no positive pixel map to all zeros.
pub fn normalize_image(img: &GrayImage16) -> Result<GrayImage8> {
    if img.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty image".into()));
    }
    let max = i64::from(*img.pixels.iter().max().expect("non-empty"));
    let pixels = if max <= 0 {
        vec![0u8; img.pixels.len()]
    } else {
        img.pixels
            .iter()
            .map(|&v| {
                let v = i64::from(v.max(0));
                // floor(v * 255 / max + 1/2) in exact integer arithmetic
                ((2 * 255 * v + max) / (2 * max)) as u8
            })
            .collect()
    };
    GrayImage8::new(img.height, img.width, pixels)
}

/// Parse a binary PGM (`P5`). Samples are one byte when `maxval < 256`,
/// otherwise two bytes big-endian.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<GrayImage16> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;

    if fields[0] != "P5" {
        return Err(Error::parse(
            origin,
            1,
            format!("expected binary PGM magic P5, found {}", fields[0]),
        ));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(origin, 1, format!("invalid {what} `{s}`")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(origin, 1, format!("maxval {maxval} out of range")));
    }
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or_default();
    let expected = width * height * bytes_per_sample;
    if raster.len() < expected {
        return Err(Error::parse(
            origin,
            1,
            format!("raster has {} bytes, expected {expected}", raster.len()),
        ));
    }
    let pixels = if bytes_per_sample == 1 {
        raster[..expected].iter().map(|&b| i32::from(b)).collect()
    } else {
        raster[..expected]
            .chunks_exact(2)
            .map(|c| i32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    };
    GrayImage16::new(height, width, pixels)
}

pub fn encode_pgm8(img: &GrayImage8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Encode a 16-bit PGM (maxval 65535). Negative samples clamp to zero since
/// the format is unsigned.
pub fn encode_pgm16(img: &GrayImage16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.pixels {
        out.extend_from_slice(&(v.clamp(0, 65535) as u16).to_be_bytes());
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage16> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm8(path: &Path, img: &GrayImage8) -> Result<()> {
    fs::write(path, encode_pgm8(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, px: Vec<i32>) -> GrayImage16 {
        GrayImage16::new(h, w, px).unwrap()
    }

    #[test]
    fn all_zero_stays_zero() {
        let out = normalize_image(&img(2, 2, vec![0; 4])).unwrap();
        assert_eq!(out.pixels, vec![0; 4]);
    }

    #[test]
    fn single_positive_pixel_is_full_scale() {
        let out = normalize_image(&img(1, 1, vec![100])).unwrap();
        assert_eq!(out.pixels, vec![255]);
    }

    #[test]
    fn clamp_and_scale() {
        // 200/400*255 = 127.5 -> 128, 100/400*255 = 63.75 -> 64
        let out = normalize_image(&img(2, 2, vec![-50, 200, 400, 100])).unwrap();
        assert_eq!(out.pixels, vec![0, 128, 255, 64]);
    }

    #[test]
    fn all_negative_maps_to_zero() {
        let out = normalize_image(&img(1, 3, vec![-5, -1, -300])).unwrap();
        assert_eq!(out.pixels, vec![0, 0, 0]);
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(normalize_image(&img(0, 0, vec![])).is_err());
    }

    #[test]
    fn pgm_round_trip_16_bit() {
        let src = img(2, 3, vec![0, 1, 256, 65535, 1000, 7]);
        let decoded = decode_pgm(&encode_pgm16(&src), Path::new("mem")).unwrap();
        assert_eq!(decoded, src);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# scanner slice\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 250]);
        let decoded = decode_pgm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(decoded.pixels, vec![3, 250]);
    }

    #[test]
    fn pgm_truncated_raster_is_parse_error() {
        let bytes = b"P5\n4 4\n65535\n\x00\x01".to_vec();
        assert!(matches!(
            decode_pgm(&bytes, Path::new("mem")),
            Err(Error::Parse { .. })
        ));
    }

    proptest! {
        #[test]
        fn positive_input_reaches_full_scale(px in prop::collection::vec(-32768i32..=65535, 1..64)) {
            let n = px.len();
            let any_positive = px.iter().any(|&v| v > 0);
            let out = normalize_image(&img(1, n, px)).unwrap();
            if any_positive {
                prop_assert_eq!(*out.pixels.iter().max().unwrap(), 255);
            } else {
                prop_assert!(out.pixels.iter().all(|&v| v == 0));
            }
        }
    }
}
