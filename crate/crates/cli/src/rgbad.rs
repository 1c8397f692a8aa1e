//! A minimal binary container for five-channel view images (red, green,
//! blue, alpha, depth), used to hand rendered views between `export` and
//! `sample --image`.
//!
//! Layout, little-endian: magic `PLVI`, version u32, height u32, width u32,
//! then `height * width * 5` f32 values in row-major (row, column, channel)
//! order.

use crate::commands::{CResult, CliError};
use ndarray::Array3;
use plume_core::geometry::ViewImage;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PLVI";
pub const VERSION: u32 = 1;
pub const CHANNELS: usize = 5;

pub fn write_view(image: &ViewImage, path: &Path) -> CResult<()> {
    let (h, w, c) = image.pixels.dim();
    if c != CHANNELS {
        return Err(CliError::Runtime(format!(
            "view image has {c} channels, expected {CHANNELS}"
        )));
    }
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    out.write_all(&MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&(h as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&(w as u32).to_le_bytes()).map_err(io_err)?;
    let mut buf = Vec::with_capacity(h * w * CHANNELS * 4);
    for &v in image.pixels.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn read_view(path: &Path) -> CResult<ViewImage> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if magic != MAGIC {
        return Err(CliError::Runtime(format!(
            "{}: not a view image file (bad magic {magic:?})",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CliError::Runtime(format!(
            "{}: file is version {version}, this build reads version {VERSION}",
            path.display()
        )));
    }
    r.read_exact(&mut word).map_err(io_err)?;
    let h = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io_err)?;
    let w = u32::from_le_bytes(word) as usize;
    if h == 0 || w == 0 || h > 4096 || w > 4096 {
        return Err(CliError::Runtime(format!(
            "{}: implausible image dimensions {h}x{w}",
            path.display()
        )));
    }
    let count = h * w * CHANNELS;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(CliError::Runtime(format!(
            "{}: trailing bytes after pixel data",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(CliError::Runtime(format!(
                "{}: non-finite pixel value",
                path.display()
            )));
        }
        values.push(v);
    }
    let pixels = Array3::from_shape_vec((h, w, CHANNELS), values)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(ViewImage { pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn test_image() -> ViewImage {
        ViewImage {
            pixels: Array3::from_shape_fn((8, 8, 5), |(r, c, ch)| {
                (r * 100 + c * 10 + ch) as f32 * 0.01
            }),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("view.rgbad");
        let img = test_image();
        write_view(&img, &path).unwrap();
        let back = read_view(&path).unwrap();
        assert_eq!(img.pixels, back.pixels);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("view.rgbad");
        write_view(&test_image(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Truncation.
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(read_view(&path).is_err());

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_view(&path).unwrap_err().to_string().contains("magic"));

        // Wrong version mentions both versions.
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        let msg = read_view(&path).unwrap_err().to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");

        // Trailing bytes.
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(read_view(&path).unwrap_err().to_string().contains("trailing"));
    }
}
