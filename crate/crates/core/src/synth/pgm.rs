//! Binary PGM (P5) with maxval 255.

use std::io::Write;
use std::path::Path;

use super::SynthError;

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n").expect("write to vec");
    out.extend_from_slice(pixels);
    out
}

/// Decodes a P5 image, returning (width, height, pixels).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), SynthError> {
    let bad = |msg: &str| SynthError::Pgm(msg.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| bad("dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() != need {
        return Err(SynthError::Pgm(format!(
            "expected {need} pixel bytes, found {}",
            data.len()
        )));
    }
    Ok((width, height, data.to_vec()))
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), SynthError> {
    std::fs::write(path, encode(width, height, pixels)).map_err(|e| SynthError::io(path, e))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>), SynthError> {
    let bytes = std::fs::read(path).map_err(|e| SynthError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let bytes = encode(w, h, &pixels);
            prop_assert_eq!(decode(&bytes).unwrap(), (w, h, pixels));
        }
    }

    #[test]
    fn header_layout() {
        assert_eq!(&encode(2, 1, &[0, 255])[..], b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn comments_and_truncation() {
        assert_eq!(decode(b"P5 # c\n1 1 255\n\x07").unwrap(), (1, 1, vec![7]));
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P6\n1 1\n255\n\x00").is_err());
    }
}
