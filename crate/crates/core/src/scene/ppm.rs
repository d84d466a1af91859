//! Binary PPM (P6, maxval 255) image I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write rgb values in [0, 1] as a P6 file.
pub fn write_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3, "ppm buffer size mismatch");
    let mut buf = Vec::with_capacity(rgb.len() + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", width, height).as_bytes());
    buf.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a P6 file back into rgb values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Dataset(format!("{}: {}", path.display(), msg));
    // Header: three whitespace-separated fields after the magic, then one
    // whitespace byte before the pixel block.
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let field: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
        fields.push(field);
    }
    pos += 1; // the single whitespace byte after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let rgb = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((rgb, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let (w, h) = (7, 5);
        let rgb: Vec<f64> = (0..w * h * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        write_ppm(&path, &rgb, w, h).unwrap();
        let (back, rw, rh) = read_ppm(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        assert_eq!(back, rgb);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\0").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
