//! 8-bit binary PGM (P5) image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::FaceImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode(img: &FaceImage) -> Vec<u8> {
    let (h, w) = img.size();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.values.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<FaceImage> {
    let fail = |detail: String| Error::format(origin, detail);
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(fail("bad magic, expected P5".to_string()));
    }
    let w: usize = token(bytes)?.parse().map_err(|_| fail("bad width".to_string()))?;
    let h: usize = token(bytes)?.parse().map_err(|_| fail("bad height".to_string()))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| fail("bad maxval".to_string()))?;
    if maxval != 255 {
        return Err(fail(format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(fail(format!("degenerate dimensions {w}x{h}")));
    }
    pos += 1; // single whitespace after maxval
    let expected = pos + w * h;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload length {} does not match {w}x{h} ({} expected)",
            bytes.len(),
            expected
        )));
    }
    let data: Vec<f64> = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    FaceImage::new(Tensor::new(vec![1, h, w], data)?)
}

pub fn save_image(img: &FaceImage, path: &Path) -> Result<()> {
    let bytes = encode(img);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_image(path: &Path) -> Result<FaceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization_bound() {
        let img = FaceImage::new(Tensor::from_fn(&[1, 6, 5], |i| (i as f64 * 0.137) % 1.0)).unwrap();
        let back = decode(&encode(&img), "mem").unwrap();
        assert_eq!(back.size(), (6, 5));
        for (a, b) in img.values.data().iter().zip(back.values.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let img = FaceImage::new(Tensor::full(&[1, 4, 4], 0.25)).unwrap();
        let mut bytes = encode(&img);
        bytes.pop();
        assert!(decode(&bytes, "mem").is_err());
    }

    #[test]
    fn quantization_is_round_to_nearest() {
        let img = FaceImage::new(Tensor::full(&[1, 1, 1], 0.5)).unwrap();
        let bytes = encode(&img);
        assert_eq!(*bytes.last().unwrap(), 128); // 0.5*255 = 127.5 -> 128
    }
}
