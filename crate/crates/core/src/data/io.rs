//! 8-bit PGM (P5) and PNG reading and writing.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{CtdError, Result};
use crate::metrics::Map;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM with maxval 255.
pub fn write_pgm(path: &Path, map: &Map) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(map.data.iter().map(|&v| to_byte(v)));
    fs::write(path, bytes).map_err(|e| CtdError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Map> {
    let bytes = fs::read(path).map_err(|e| CtdError::io(path, e))?;
    parse_pgm(&bytes).map_err(|m| CtdError::io(path, m))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Map, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic `{}`)", fields[0]));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad PGM header field `{s}`"))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let pixels = bytes.get(pos + 1..).unwrap_or(&[]);
    if pixels.len() < w * h {
        return Err(format!(
            "truncated PGM data: {} of {} bytes",
            pixels.len(),
            w * h
        ));
    }
    let data = pixels[..w * h]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok(Map {
        height: h,
        width: w,
        data,
    })
}

pub fn write_png_gray(path: &Path, map: &Map) -> Result<()> {
    let bytes = map.data.iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| CtdError::Shape("gray image buffer size".into()))?;
    img.save(path).map_err(|e| CtdError::io(path, e))
}

/// RGB image as planar `(3, H, W)` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbPlanes {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn write_png_rgb(path: &Path, img: &RgbPlanes) -> Result<()> {
    let plane = img.height * img.width;
    let mut bytes = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(img.data[c * plane + i]));
        }
    }
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| CtdError::Shape("rgb image buffer size".into()))?;
    buf.save(path).map_err(|e| CtdError::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbPlanes> {
    let img = ImageReader::open(path)
        .map_err(|e| CtdError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CtdError::io(path, e))?
        .decode()
        .map_err(|e| CtdError::io(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(RgbPlanes {
        height: h,
        width: w,
        data,
    })
}

/// Grayscale map from a `.pgm` file, or any decodable image otherwise.
pub fn read_gray(path: &Path) -> Result<Map> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
    {
        return read_pgm(path);
    }
    let img = ImageReader::open(path)
        .map_err(|e| CtdError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CtdError::io(path, e))?
        .decode()
        .map_err(|e| CtdError::io(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Map {
        height: h,
        width: w,
        data: img
            .into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = Map::new(3, 4, (0..12).map(|i| (i % 2) as f32).collect()).unwrap();
        write_pgm(&path, &m).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), m);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_pgm(&path), Err(CtdError::Io { .. })));
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let m = parse_pgm(&bytes).unwrap();
        assert_eq!(m.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rgb_png_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RgbPlanes {
            height: 2,
            width: 3,
            data: (0..18).map(|i| i as f32 / 17.0).collect(),
        };
        write_png_rgb(&path, &img).unwrap();
        let back = read_rgb(&path).unwrap();
        let err = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
        fs::write(&path, b"\x89PNG\r\n").unwrap();
        assert!(matches!(read_rgb(&path), Err(CtdError::Io { .. })));
    }
}
