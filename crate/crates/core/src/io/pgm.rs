//! Binary 8-bit PGM (P5).

use std::io::Write;
use std::path::Path;

use super::LoadError;
use crate::gray::GrayImage;

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut number = |what: &str| -> Result<usize, String> { token()?.parse().map_err(|_| format!("bad {what}")) };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let len = width * height;
    if bytes.len() < data_start + len {
        return Err(format!("expected {len} pixels, found {}", bytes.len().saturating_sub(data_start)));
    }
    GrayImage::from_raw(width, height, bytes[data_start..data_start + len].to_vec()).ok_or_else(|| "bad dimensions".into())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.as_raw());
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, LoadError> {
    let bytes = std::fs::read(path).map_err(|e| LoadError::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| LoadError::Format { path: path.to_path_buf(), message: m })
}

pub fn write_pgm(image: &GrayImage, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_pgm(image))?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::from_raw(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([4, 5]);
        assert_eq!(decode_pgm(&bytes).unwrap().as_raw(), &[4, 5]);
    }

    #[test]
    fn rejects_ascii_and_short_files() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x01\x02").is_err());
        assert!(decode_pgm(b"P5\n4 4\n65535\n").is_err());
    }
}
