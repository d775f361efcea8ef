//! Binary PGM (P5) read/write, 8-bit only.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm8(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "pgm payload {} does not match {}x{}",
            data.len(),
            w,
            h
        )));
    }
    let mut buf = Vec::with_capacity(32 + data.len());
    write!(buf, "P5\n{} {}\n255\n", w, h).expect("in-memory write");
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns (width, height, pixels). Accepts whitespace and `#` comments in
/// the header, maxval must be 255.
pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(Error::Format(format!(
            "{}: not a binary PGM (P5)",
            path.display()
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "{}: malformed PGM header",
                path.display()
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad PGM header field", path.display())))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: unsupported PGM maxval {maxval}",
            path.display()
        )));
    }
    // single whitespace byte separates header from payload
    pos += 1;
    let payload = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format(format!("{}: truncated PGM payload", path.display())))?;
    Ok((w, h, payload.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let data: Vec<u8> = (0..6u8).flat_map(|r| (0..4u8).map(move |c| r * 4 + c)).collect();
        write_pgm8(&path, 4, 6, &data).unwrap();
        let (w, h, back) = read_pgm8(&path).unwrap();
        assert_eq!((w, h), (4, 6));
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_foreign_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\n\0\0\0").unwrap();
        assert!(matches!(read_pgm8(&path), Err(Error::Format(_))));
    }
}
