//! Image output: 16-bit binary PGM, raw little-endian f64, optional PNG.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use deep_glr::Image;

/// Maps `[lo, hi]` linearly onto `0..=65535`, clamping outside values.
pub fn to_u16(image: &Image, lo: f64, hi: f64) -> Vec<u16> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    image
        .data()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

pub fn encode_pgm16(image: &Image, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    for v in to_u16(image, lo, hi) {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Parses a binary 16-bit PGM written by [`encode_pgm16`].
#[cfg(test)]
pub fn decode_pgm16(bytes: &[u8]) -> Option<(usize, usize, Vec<u16>)> {
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
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let body = bytes.get(pos..pos + 2 * w * h)?;
    let px = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Some((w, h, px))
}

pub fn write_pgm16(path: &Path, image: &Image, lo: f64, hi: f64) -> std::io::Result<()> {
    std::fs::write(path, encode_pgm16(image, lo, hi))
}

pub fn write_raw(path: &Path, image: &Image) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_raw(path: &Path, size: usize) -> std::io::Result<Image> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != 8 * size * size {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                8 * size * size,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image::new(size, size, data).expect("sized above"))
}

pub fn write_png8(path: &Path, image: &Image, lo: f64, hi: f64) -> std::io::Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let px: Vec<u8> = to_u16(image, lo, hi).iter().map(|v| (v >> 8) as u8).collect();
    let mut w = enc.write_header().map_err(std::io::Error::other)?;
    w.write_image_data(&px).map_err(std::io::Error::other)
}
