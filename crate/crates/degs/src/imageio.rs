//! PNG (8 and 16 bit) and raw float32 image files.

use std::io::{Read, Write};
use std::path::Path;

use degs_core::{Image, Mask};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{DegsError, Result};
use crate::fsutil::write_atomic;

/// Magic bytes that open a raw float32 dump.
pub const RAW_MAGIC: &[u8; 4] = b"DGRF";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn encode(path: &Path, img: DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DegsError::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn channel_count_ok(path: &Path, img: &Image) -> Result<()> {
    match img.channels {
        1 | 3 => Ok(()),
        c => Err(DegsError::format(path, format!("cannot store a {c}-channel image as PNG"))),
    }
}

/// Writes an image with 1 or 3 channels as 8-bit PNG, clamping to [0, 1].
pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    channel_count_ok(path, img)?;
    let (w, h) = (img.width as u32, img.height as u32);
    let data: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, data).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, data).expect("buffer size"))
    };
    encode(path, dynamic)
}

/// 16-bit PNG variant of [`write_png8`].
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    channel_count_ok(path, img)?;
    let (w, h) = (img.width as u32, img.height as u32);
    let data: Vec<u16> = img.data.iter().map(|&v| to_u16(v)).collect();
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data).expect("buffer size"))
    };
    encode(path, dynamic)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| DegsError::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| DegsError::format(path, e.to_string()))
}

/// Reads a PNG as an RGB image in [0, 1]. 8-bit files map `k` to `k / 255`,
/// 16-bit files map `k` to `k / 65535`; alpha is dropped.
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if is_16_bit(&img) {
        img.into_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.into_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    Ok(Image::from_data(w, h, 3, data)?)
}

fn is_16_bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    )
}

/// Writes a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, data).expect("buffer size");
    encode(path, DynamicImage::ImageLuma8(buf))
}

/// Reads a grayscale (or color, via luma) PNG mask; a pixel is set when its
/// luma is at least half the range.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Mask::new(w, h);
    for (d, &v) in mask.data.iter_mut().zip(img.as_raw()) {
        *d = v >= 32768;
    }
    Ok(mask)
}

/// Raw dump: magic, then width, height, channels as little-endian u32, then
/// the samples as little-endian f32, row-major with interleaved channels.
pub fn write_raw_f32(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + img.data.len() * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [img.width, img.height, img.channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &img.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_raw_f32(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DegsError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(DegsError::format(path, "not a raw float32 image (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    let n = w.checked_mul(h).and_then(|v| v.checked_mul(c)).ok_or_else(|| DegsError::format(path, "dimensions overflow"))?;
    if bytes.len() != 16 + n * 4 {
        return Err(DegsError::format(path, format!("expected {} sample bytes, found {}", n * 4, bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(Image::from_data(w, h, c, data)?)
}

/// Writes rows of f32 values back to back, little-endian.
pub fn write_f32_rows<W: Write>(out: &mut W, rows: &[Vec<f64>]) -> std::io::Result<()> {
    for row in rows {
        for &v in row {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png8_round_trips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::from_data(4, 3, 3, data).unwrap();
        write_png8(&p, &img).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), img);
    }

    #[test]
    fn png16_keeps_sixteen_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_data(2, 1, 3, vec![0.0, 1.0 / 65535.0, 32768.0 / 65535.0, 1.0, 40000.0 / 65535.0, 3.0 / 65535.0]).unwrap();
        write_png16(&p, &img).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), img);
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = Mask::new(5, 4);
        m.set(1, 2, true);
        m.set(4, 0, true);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn raw_dump_round_trips_f32_values_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.f32");
        let img = Image::from_data(3, 2, 1, vec![0.25, -1.5, 3.0, 1e-3f32 as f64, 0.0, 7.0]).unwrap();
        write_raw_f32(&p, &img).unwrap();
        assert_eq!(read_raw_f32(&p).unwrap(), img);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_raw_f32(&p), Err(DegsError::Format { .. })));
    }
}
