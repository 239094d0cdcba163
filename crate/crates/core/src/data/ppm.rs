//! Binary PPM (P6) encoding and decoding, maxval 255.

use crate::error::{Error, Result};

/// Serialize RGB bytes (row-major, 3 per pixel) as binary P6.
pub fn encode(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + rgb.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(rgb);
    out
}

/// Parse binary P6 into (width, height, rgb bytes). Accepts whitespace and
/// `#` comments in the header; requires maxval 255.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::data("not a binary PPM: missing P6 magic".to_string()));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        skip_separators(bytes, &mut pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::data("ppm header: expected an integer".to_string()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::data("ppm header: invalid utf-8".to_string()))?;
        *field = text
            .parse()
            .map_err(|_| Error::data(format!("ppm header: bad integer `{text}`")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(format!(
            "ppm maxval {maxval} unsupported, expected 255"
        )));
    }
    // exactly one whitespace byte after maxval
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data("ppm header: missing separator after maxval".to_string()));
    }
    pos += 1;

    let need = width * height * 3;
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(Error::data(format!(
            "ppm body has {} bytes, expected {need} for {width}x{height}",
            body.len()
        )));
    }
    Ok((width, height, body.to_vec()))
}

/// Advance past whitespace and `#`-to-end-of-line comments.
fn skip_separators(bytes: &[u8], pos: &mut usize) -> Result<()> {
    let mut advanced = false;
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
            advanced = true;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            advanced = true;
            continue;
        }
        break;
    }
    if !advanced {
        return Err(Error::data("ppm header: missing whitespace".to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let enc = encode(4, 3, &rgb);
        let (w, h, back) = decode(&enc).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, rgb);
    }

    #[test]
    fn header_comments_and_whitespace_are_accepted() {
        let mut bytes = b"P6 # comment\n# another\n 2\t2 \n255\n".to_vec();
        bytes.extend_from_slice(&[9u8; 12]);
        let (w, h, rgb) = decode(&bytes).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(rgb, vec![9u8; 12]);
    }

    #[test]
    fn malformed_inputs_are_data_errors() {
        assert!(decode(b"P3\n1 1\n255\nxxx").is_err());
        assert!(decode(b"P6\n1 1\n65535\n").is_err());
        // truncated body
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 5]);
        assert!(decode(&bytes).is_err());
    }
}
