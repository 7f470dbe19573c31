//! Binary portable pixmap (P6, 8-bit) I/O and image resizing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P6 file into a `3×H×W` tensor with values `k / 255`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::data(format!("{}: {m}", path.display())))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}, expected P6", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit pixmaps are supported, maxval {max}"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 3 * w * h {
        return Err(format!("raster has {} bytes, expected {}", raster.len(), 3 * w * h));
    }
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| e.to_string())
}

/// Encodes a `3×H×W` tensor with values in `[0, 1]` (rounded to the
/// nearest 8-bit level).
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::data(format!("image must be [3,H,W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::data(format!("P6 images need 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_level(d[ch * h * w + i]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Nearest 8-bit level of a value in `[0, 1]`.
pub(crate) fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling of a `C×H×W` image to `C×out_h×out_w` with
/// pixel-center alignment.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::data(format!("image must be [C,H,W], got {:?}", image.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::data("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut out = vec![0f32; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_level_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::from_fn(&[3, 4, 4], |i| i as f32 / 48.0);
        assert_eq!(resize_bilinear(&img, 4, 4).unwrap(), img);
        let flat = Tensor::full(&[1, 7, 5], 0.25f32);
        let r = resize_bilinear(&flat, 3, 9).unwrap();
        assert_eq!(r.shape(), &[1, 3, 9]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
