//! PNG and PGM conversion for `(3, H, W)` images and `(H, W)` masks/maps
//! with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use anomaly_tensor::Tensor;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, IoContext, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn save_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Data(format!("expected (3, H, W) image, got {s:?}"))),
    };
    let d = img.data();
    let out: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary mask from a grayscale PNG; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p[0] > 0 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(&[h, w], data)?)
}

fn hw(map: &Tensor<f32>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::Data(format!("expected (H, W) map, got {s:?}"))),
    }
}

pub fn save_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    save_gray(path, mask)
}

pub fn save_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = hw(map)?;
    let d = map.data();
    let out: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(d[y as usize * w + x as usize])])
    });
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 16-bit binary PGM with `[0, 1] -> [0, 65535]` linear quantization.
pub fn encode_pgm16(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = hw(map)?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Data(format!("malformed PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected P5 with maxval 65535"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes
        .get(pos..pos + 2 * w * h)
        .ok_or_else(|| bad("truncated body"))?;
    let data = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Ok(Tensor::new(&[h, w], data)?)
}

pub fn save_pgm16(path: &Path, map: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm16(map)?).at(path)
}

/// Red heat blended over the grayscale of `img` (alpha = score).
pub fn save_heat_overlay(path: &Path, img: &Tensor<f32>, scores: &Tensor<f32>) -> Result<()> {
    let (h, w) = hw(scores)?;
    if img.shape() != [3, h, w] {
        return Err(Error::Data(format!(
            "overlay image {:?} does not match map {h}x{w}",
            img.shape()
        )));
    }
    let d = img.data();
    let s = scores.data();
    let out: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let g = (d[i] + d[h * w + i] + d[2 * h * w + i]) / 3.0;
        let a = s[i].clamp(0.0, 1.0);
        Rgb([
            to_u8(g * (1.0 - a) + a),
            to_u8(g * (1.0 - a)),
            to_u8(g * (1.0 - a)),
        ])
    });
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
