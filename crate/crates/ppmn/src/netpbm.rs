//! Binary netpbm codecs: P6 (color) decoding/encoding for dataset images
//! and P5 (grayscale) encoding for feature-map debug dumps.

use std::path::Path;

use ppmn_core::tensor::Tensor;

use crate::error::{CliError, Result};

#[derive(Debug)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Interleaved RGB rows, `3 * width * height` bytes.
    pub rgb: Vec<u8>,
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Advances over whitespace and `#` comments, then reads one ASCII
    /// unsigned integer.
    fn read_int(&mut self) -> Option<u32> {
        loop {
            match self.bytes.get(self.pos)? {
                b'#' => {
                    while *self.bytes.get(self.pos)? != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes a binary 8-bit P6 image. The `path` only labels diagnostics.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<PpmImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(format_err(path, "not a binary P6 PPM file"));
    }
    let mut scanner = HeaderScanner { bytes, pos: 2 };
    let width = scanner.read_int().ok_or_else(|| format_err(path, "missing width"))?;
    let height = scanner.read_int().ok_or_else(|| format_err(path, "missing height"))?;
    let maxval = scanner.read_int().ok_or_else(|| format_err(path, "missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero-sized image"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(format_err(path, format!("maxval {maxval} outside the 8-bit range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let sep = scanner.pos;
    if !bytes.get(sep).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(format_err(path, "missing raster separator"));
    }
    let raster = &bytes[sep + 1..];
    let expected = 3 * width as usize * height as usize;
    if raster.len() < expected {
        return Err(format_err(
            path,
            format!("raster truncated: {} of {expected} bytes", raster.len()),
        ));
    }
    Ok(PpmImage {
        width: width as usize,
        height: height as usize,
        maxval,
        rgb: raster[..expected].to_vec(),
    })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Decoded image to a `(1, 3, h, w)` tensor with values scaled to `[0, 1]`.
pub fn image_to_tensor(image: &PpmImage) -> Tensor {
    let scale = 1.0 / image.maxval as f32;
    Tensor::from_fn([1, 3, image.height, image.width], |_, c, y, x| {
        image.rgb[3 * (y * image.width + x) + c] as f32 * scale
    })
}

/// `(1, 3, h, w)` tensor in `[0, 1]` to interleaved 8-bit RGB.
pub fn tensor_to_rgb8(image: &Tensor) -> (usize, usize, Vec<u8>) {
    let (_, c, h, w) = image.dims();
    assert_eq!(c, 3, "expected an RGB tensor");
    let mut rgb = vec![0u8; 3 * h * w];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (image.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                rgb[3 * (y * w + x) + ch] = v;
            }
        }
    }
    (w, h, rgb)
}

/// Channel-mean of a feature map normalized to 8-bit grayscale.
pub fn map_to_gray8(map: &Tensor) -> (usize, usize, Vec<u8>) {
    let (_, c, h, w) = map.dims();
    let mut values = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += map.at(0, ch, y, x);
            }
            values[y * w + x] = acc / c as f32;
        }
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = values
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    (w, h, gray)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.ppm")
    }

    #[test]
    fn round_trip_preserves_bytes() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let encoded = encode_ppm(2, 3, &rgb);
        let decoded = decode_ppm(&encoded, &p()).unwrap();
        assert_eq!(decoded.width, 2);
        assert_eq!(decoded.height, 3);
        assert_eq!(decoded.maxval, 255);
        assert_eq!(decoded.rgb, rgb);
        assert_eq!(encode_ppm(decoded.width, decoded.height, &decoded.rgb), encoded);
    }

    #[test]
    fn tensor_conversion_round_trips_8bit_values() {
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|i| (i * 11 % 256) as u8).collect();
        let image = PpmImage { width: 4, height: 2, maxval: 255, rgb: rgb.clone() };
        let tensor = image_to_tensor(&image);
        let (w, h, back) = tensor_to_rgb8(&tensor);
        assert_eq!((w, h), (4, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn rejects_non_p6() {
        assert!(decode_ppm(b"P5\n2 2\n255\n0000", &p()).is_err());
        assert!(decode_ppm(b"JUNK", &p()).is_err());
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = encode_ppm(4, 4, &[0u8; 48]);
        bytes.truncate(bytes.len() - 1);
        let err = decode_ppm(&bytes, &p()).unwrap_err();
        assert!(format!("{err}").contains("truncated"));
    }

    #[test]
    fn rejects_wide_maxval() {
        let bytes = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        assert!(decode_ppm(bytes, &p()).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# a comment\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let image = decode_ppm(&bytes, &p()).unwrap();
        assert_eq!((image.width, image.height), (2, 1));
        assert_eq!(image.rgb, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn scales_by_maxval() {
        let bytes = b"P6\n1 1\n100\n\x64\x32\x00";
        let image = decode_ppm(bytes, &p()).unwrap();
        let tensor = image_to_tensor(&image);
        assert_eq!(tensor.at(0, 0, 0, 0), 1.0);
        assert_eq!(tensor.at(0, 1, 0, 0), 0.5);
        assert_eq!(tensor.at(0, 2, 0, 0), 0.0);
    }
}
