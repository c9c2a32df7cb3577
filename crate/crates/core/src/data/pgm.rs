//! Binary PGM (`P5`) I/O.
//!
//! Images: maxval 65535, two bytes per sample, big-endian, value
//! `⌊v·65535 + 0.5⌋`. Masks: maxval 255, samples 0 or 255. The header is
//! `P5\n<width> <height>\n<maxval>\n`; on read, `#` comments and any
//! whitespace layout are accepted.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A decoded PGM raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("pgm", format!("expected H×W or 1×H×W, got {s:?}"))),
    }
}

pub fn encode(p: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", p.width, p.height, p.maxval).into_bytes();
    for &s in &p.samples {
        if p.maxval > 255 {
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |d: String| Error::format(path, d);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad(format!("magic `{}` is not P5", fields[0])));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| bad(format!("bad {what} `{}`", fields[i])))
    };
    let (width, height, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval != 255 && maxval != 65535 {
        return Err(bad(format!("unsupported maxval {maxval}; expected 255 or 65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval".into()));
    }
    let payload = &bytes[pos + 1..];
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    if payload.len() < need {
        return Err(bad(format!("payload truncated: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(bad(format!("{} bytes after payload", payload.len() - need)));
    }
    let samples: Vec<u16> = if wide {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload.iter().map(|&b| u16::from(b)).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| usize::from(s) > maxval) {
        return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

fn write(path: &Path, p: &Pgm) -> Result<()> {
    fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes an `H×W` or `1×H×W` image with values in `[0, 1]`.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (height, width) = hw(image)?;
    if !image.is_finite() {
        return Err(Error::NonFinite(format!("image written to {}", path.display())));
    }
    let samples = image.data().iter().map(|&v| quantize(v)).collect();
    write(path, &Pgm { width, height, maxval: 65535, samples })
}

/// Reads a PGM as a `1×H×W` image scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let p = read(path)?;
    let scale = f64::from(p.maxval);
    let data = p.samples.iter().map(|&s| f64::from(s) / scale).collect();
    Tensor::new(&[1, p.height, p.width], data)
}

/// Writes a binary mask (nonzero entries become 255).
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (height, width) = hw(mask)?;
    let samples = mask.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
    write(path, &Pgm { width, height, maxval: 255, samples })
}

/// Reads a binary mask as `H×W` with entries 0 or 1.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let p = read(path)?;
    let mut data = Vec::with_capacity(p.samples.len());
    for &s in &p.samples {
        data.push(match s {
            0 => 0.0,
            s if s == p.maxval => 1.0,
            s => return Err(Error::format(path, format!("mask sample {s} is neither 0 nor {}", p.maxval))),
        });
    }
    Tensor::new(&[p.height, p.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 65535);
        assert_eq!(quantize(0.5), 32768);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Pgm { width: 2, height: 1, maxval: 65535, samples: vec![1, 258] });
        assert_eq!(bytes, b"P5\n2 1\n65535\n\x00\x01\x01\x02");
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = Tensor::new(&[2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        save_mask(&path, &m).unwrap();
        assert!(load_mask(&path).unwrap().bit_eq(&m));
    }

    #[test]
    fn constant_half_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        save_image(&path, &Tensor::full(&[1, 3, 4], 0.5)).unwrap();
        let p = read(&path).unwrap();
        assert!(p.samples.iter().all(|&s| s == 32768));
    }

    #[test]
    fn comments_are_skipped() {
        let p = decode(b"P5 # c\n# more\n1 1\n255\n\xff", Path::new("mem")).unwrap();
        assert_eq!(p.samples, vec![255]);
    }

    #[test]
    fn malformed_inputs_are_described() {
        let cases: [(&[u8], &str); 4] = [
            (b"P2\n1 1\n255\n\x00", "not P5"),
            (b"P5\n2 2\n255\n\x00", "truncated"),
            (b"P5\n1 1\n1000\n\x00\x00", "unsupported maxval"),
            (b"P5\n1", "header ends early"),
        ];
        for (bytes, needle) in cases {
            let err = decode(bytes, Path::new("x.pgm")).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
            assert!(err.contains("x.pgm"), "{err}");
        }
    }

    proptest! {
        #[test]
        fn image_roundtrip_within_one_step(v in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("i.pgm");
            let t = Tensor::new(&[1, 3, 4], v).unwrap();
            save_image(&path, &t).unwrap();
            let back = load_image(&path).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 65535.0);
            }
        }
    }
}
