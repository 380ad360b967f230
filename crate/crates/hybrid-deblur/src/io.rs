//! On-disk formats: 32-bit float PFM for all intermediates, 16-bit PNG for
//! display-space exports, and 8-bit PNG validity-mask companions.
//!
//! PFM files follow the netpbm convention: `PF`/`Pf` header, dimensions,
//! a negative scale for little-endian data, scanlines stored bottom-up.
//! An image whose mask is not all-true gains a `<stem>.mask.png` companion
//! next to it; readers pick the companion up automatically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::{Image, ImageError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {what}")]
    BadFormat { path: PathBuf, what: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

fn bad(path: &Path, what: impl Into<String>) -> IoError {
    IoError::BadFormat { path: path.to_path_buf(), what: what.into() }
}

/// Path of the validity-mask companion: `dir/name.pfm -> dir/name.mask.png`.
pub fn mask_companion_path(path: &Path) -> PathBuf {
    path.with_extension("mask.png")
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Writes a PFM file (little-endian), plus a mask companion when any pixel
/// is invalid.
pub fn write_pfm(path: &Path, img: &Image) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    let magic = if img.channels() == 3 { "PF" } else { "Pf" };
    write!(out, "{magic}\n{} {}\n-1.0\n", img.width(), img.height())?;
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for c in 0..img.channels() {
                out.write_all(&img.get(x, y, c).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    if !img.fully_valid() {
        write_mask_png(&mask_companion_path(path), img)?;
    }
    Ok(())
}

/// Reads a PFM file, honoring the endianness encoded in its scale line and
/// applying a mask companion when one exists.
pub fn read_pfm(path: &Path) -> Result<Image, IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> Result<String, IoError> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated header"));
        }
        // consume the single whitespace byte terminating the token
        if pos < data.len() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&data[start..pos - 1]).into_owned())
    };

    let magic = token(&data)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(path, format!("not a PFM file (magic {other:?})"))),
    };
    let width: usize =
        token(&data)?.parse().map_err(|e| bad(path, format!("bad width: {e}")))?;
    let height: usize =
        token(&data)?.parse().map_err(|e| bad(path, format!("bad height: {e}")))?;
    let scale: f64 = token(&data)?.parse().map_err(|e| bad(path, format!("bad scale: {e}")))?;
    let little_endian = scale < 0.0;

    let n = width * height * channels;
    // `pos` sits one past the single whitespace byte that ends the header.
    let body = &data[pos..];
    if body.len() < n * 4 {
        return Err(bad(path, format!("expected {} bytes of samples, found {}", n * 4, body.len())));
    }
    let mut samples = vec![0.0f32; n];
    for (i, chunk) in body[..n * 4].chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        // PFM rows are stored bottom-up.
        let flat = i / channels;
        let c = i % channels;
        let x = flat % width;
        let y = height - 1 - flat / width;
        samples[(y * width + x) * channels + c] = v;
    }
    let mut img = Image::new(width, height, channels, samples)?;

    let mask_path = mask_companion_path(path);
    if mask_path.exists() {
        read_mask_png(&mask_path, &mut img)?;
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

const DISPLAY_GAMMA: f64 = 2.2;

/// Exports to 16-bit PNG, clipping to [0, 1] and applying the display
/// gamma. Lossy by design; use PFM for intermediates.
pub fn write_png16(path: &Path, img: &Image) -> Result<(), IoError> {
    let encode = |v: f32| -> u16 {
        let lin = (v as f64).clamp(0.0, 1.0);
        (lin.powf(1.0 / DISPLAY_GAMMA) * 65535.0).round() as u16
    };
    match img.channels() {
        1 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                img.width() as u32,
                img.height() as u32,
            );
            for (x, y, p) in buf.enumerate_pixels_mut() {
                *p = image::Luma([encode(img.get(x as usize, y as usize, 0))]);
            }
            buf.save(path)?;
        }
        _ => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
                img.width() as u32,
                img.height() as u32,
            );
            for (x, y, p) in buf.enumerate_pixels_mut() {
                *p = image::Rgb([
                    encode(img.get(x as usize, y as usize, 0)),
                    encode(img.get(x as usize, y as usize, 1)),
                    encode(img.get(x as usize, y as usize, 2)),
                ]);
            }
            buf.save(path)?;
        }
    }
    Ok(())
}

/// Imports an 8- or 16-bit PNG into linear space.
pub fn read_png16(path: &Path) -> Result<Image, IoError> {
    let decoded = image::open(path)?;
    let decode = |v: u16| -> f32 { ((v as f64 / 65535.0).powf(DISPLAY_GAMMA)) as f32 };
    let img = match decoded {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Image::from_fn(w, h, 1, |x, y, _| decode(buf.get_pixel(x as u32, y as u32).0[0]))
        }
        other => {
            let buf = other.into_rgb16();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Image::from_fn(w, h, 3, |x, y, c| decode(buf.get_pixel(x as u32, y as u32).0[c]))
        }
    };
    Ok(img)
}

fn write_mask_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let mut buf =
        image::GrayImage::new(img.width() as u32, img.height() as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        *p = image::Luma([if img.is_valid(x as usize, y as usize) { 255 } else { 0 }]);
    }
    buf.save(path)?;
    Ok(())
}

fn read_mask_png(path: &Path, img: &mut Image) -> Result<(), IoError> {
    let decoded = image::open(path)?.into_luma8();
    if decoded.width() as usize != img.width() || decoded.height() as usize != img.height() {
        return Err(bad(path, "mask dimensions do not match the image"));
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            img.set_valid(x, y, decoded.get_pixel(x as u32, y as u32).0[0] >= 128);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    #[test]
    fn pfm_roundtrip_gray_and_color() {
        let dir = tmp();
        let gray = Image::from_fn(7, 5, 1, |x, y, _| (x * 10 + y) as f32 * 0.01 - 0.2);
        let color = Image::from_fn(4, 6, 3, |x, y, c| (x + 2 * y + 3 * c) as f32 * 0.05);
        for (name, img) in [("g.pfm", &gray), ("c.pfm", &color)] {
            let path = dir.path().join(name);
            write_pfm(&path, img).unwrap();
            let back = read_pfm(&path).unwrap();
            assert_eq!(&back, img, "{name} did not roundtrip bit-exactly");
        }
    }

    #[test]
    fn pfm_mask_companion_roundtrip() {
        let dir = tmp();
        let mut img = Image::from_fn(9, 9, 1, |x, y, _| (x + y) as f32 * 0.1);
        img.set_valid(3, 4, false);
        img.set_valid(8, 0, false);
        let path = dir.path().join("masked.pfm");
        write_pfm(&path, &img).unwrap();
        assert!(mask_companion_path(&path).exists(), "companion must be written");
        let back = read_pfm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_fully_valid_writes_no_companion() {
        let dir = tmp();
        let img = Image::constant(4, 4, 1, 0.5);
        let path = dir.path().join("plain.pfm");
        write_pfm(&path, &img).unwrap();
        assert!(!mask_companion_path(&path).exists());
        assert_eq!(read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn pfm_reads_big_endian_scale() {
        let dir = tmp();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.5f32).to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.25);
        assert_eq!(img.get(1, 0, 0), -1.5);
    }

    #[test]
    fn pfm_rejects_garbage() {
        let dir = tmp();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"P6\n2 2\n255\n").unwrap();
        assert!(read_pfm(&path).is_err());
        let truncated = dir.path().join("short.pfm");
        std::fs::write(&truncated, b"Pf\n4 4\n-1.0\nxx").unwrap();
        assert!(read_pfm(&truncated).is_err());
    }

    #[test]
    fn png16_roundtrip_within_quantization() {
        let dir = tmp();
        let img = Image::from_fn(16, 16, 3, |x, y, c| {
            ((x + y + c) as f32 / 34.0).clamp(0.0, 1.0)
        });
        let path = dir.path().join("out.png");
        write_png16(&path, &img).unwrap();
        let back = read_png16(&path).unwrap();
        let mut worst = 0.0f32;
        for (a, b) in img.samples().iter().zip(back.samples()) {
            worst = worst.max((a - b).abs());
        }
        // 16-bit quantization in display space stays well under 1e-3 linear.
        assert!(worst < 1e-3, "16-bit PNG roundtrip error {worst}");
    }

    #[test]
    fn png16_export_clips_out_of_range() {
        let dir = tmp();
        let img = Image::from_fn(8, 8, 1, |x, _, _| if x < 4 { -0.5 } else { 1.5 });
        let path = dir.path().join("clip.png");
        write_png16(&path, &img).unwrap();
        let back = read_png16(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert!((back.get(7, 0, 0) - 1.0).abs() < 1e-6);
    }
}
