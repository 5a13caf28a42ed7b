//! Plain-text PPM (P3) and PGM (P2) with maxval 255.
//!
//! Values in [0, 1] are stored as `round(v · 255)`; reading divides by the
//! file's maxval.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> Option<u8> {
    (v.is_finite() && (0.0..=1.0).contains(&v)).then(|| (v * 255.0).round() as u8)
}

/// Encodes a `3×H×W` tensor as P3 or an `H×W` (or `1×H×W`) tensor as P2.
pub fn encode(image: &Tensor) -> std::result::Result<String, String> {
    let (channels, h, w) = match *image.shape() {
        [3, h, w] => (3, h, w),
        [1, h, w] | [h, w] => (1, h, w),
        ref s => return Err(format!("cannot store shape {s:?} as PPM/PGM")),
    };
    let magic = if channels == 3 { "P3" } else { "P2" };
    let mut out = format!("{magic}\n{w} {h}\n255\n");
    let data = image.data();
    let plane = h * w;
    for r in 0..h {
        let mut first = true;
        for c in 0..w {
            for ch in 0..channels {
                let v = data[ch * plane + r * w + c];
                let q = quantize(v).ok_or_else(|| format!("value {v} outside [0, 1]"))?;
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{q}").unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses P3 into `3×H×W` or P2 into `H×W`.
pub fn decode(text: &str) -> std::result::Result<Tensor, String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_ascii_whitespace);
    let channels = match tokens.next() {
        Some("P3") => 3,
        Some("P2") => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let tok = tokens.next().ok_or_else(|| format!("missing {what}"))?;
        tok.parse().map_err(|_| format!("bad {what} {tok:?}"))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} outside 1..=255"));
    }
    let plane = h * w;
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for ch in 0..channels {
            let v = number("sample")?;
            if v > maxval {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
            data[ch * plane + p] = v as f64 / maxval as f64;
        }
    }
    if tokens.next().is_some() {
        return Err("trailing data".into());
    }
    let shape = if channels == 3 { vec![3, h, w] } else { vec![h, w] };
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let text = encode(image).map_err(|msg| Error::Format {
        kind: "image",
        path: path.to_path_buf(),
        msg,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text).map_err(|msg| Error::Format {
        kind: "image",
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_extremes() {
        let mut data = vec![0.5; 3 * 32 * 32];
        data[0] = 1.0;
        data[1] = 0.0;
        let text = encode(&Tensor::new(&[3, 32, 32], data).unwrap()).unwrap();
        assert!(text.starts_with("P3\n32 32\n255"));
        let first: Vec<&str> = text.lines().nth(3).unwrap().split(' ').take(4).collect();
        // pixel (0,0) = (1.0, 0.5, 0.5), pixel (0,1) starts with 0.0
        assert_eq!(first, ["255", "128", "128", "0"]);
    }

    #[test]
    fn gray_header() {
        let text = encode(&Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(text, "P2\n3 2\n255\n0 0 0\n0 0 0\n");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(encode(&Tensor::full(&[2, 2], 1.5)).is_err());
        assert!(encode(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn comments_and_malformed() {
        let t = decode("P2\n# hi\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(decode("P5\n1 1\n255\n0").is_err());
        assert!(decode("P2\n2 1\n255\n0").is_err());
        assert!(decode("P2\n1 1\n255\n300").is_err());
        assert!(decode("P2\n1 1\n255\n3 4").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = Tensor::new(&[3, 2, 2], (0..12).map(|i| i as f64 * 20.0 / 255.0).collect()).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
        assert!(read_image(dir.path().join("missing.pgm")).is_err());
    }

    proptest! {
        #[test]
        fn quantized_round_trip_is_exact(
            h in 1usize..6, w in 1usize..6, color in any::<bool>(),
            seed in proptest::collection::vec(0u8..=255, 108)
        ) {
            let c = if color { 3 } else { 1 };
            let data: Vec<f64> = seed.iter().cycle().take(c * h * w).map(|&q| q as f64 / 255.0).collect();
            let shape = if color { vec![3, h, w] } else { vec![h, w] };
            let img = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
