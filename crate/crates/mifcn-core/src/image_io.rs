//! 8-bit grayscale image I/O in the portable graymap (PGM) format.
//!
//! Reading accepts both the binary (`P5`) and plain (`P2`) variants with
//! arbitrary header whitespace and `#` comments. Writing always produces the
//! canonical binary form `P5\n<w> <h>\n255\n<raster>`, so a load/save round
//! trip of a canonical file is byte identical. Pixels travel through the
//! pipeline as reals in [0, 255]; only the writer quantizes, clamping and
//! rounding half to even.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of PGM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("PGM {what} is not a number: {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Parse PGM bytes into an `[H, W]` tensor of values in `[0, maxval]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token()?;
    match magic {
        b"P5" | b"P2" => {}
        b"P6" | b"P3" => {
            return Err(Error::Format("color PPM input is unsupported; provide single-channel PGM".into()))
        }
        b"P4" | b"P1" => {
            return Err(Error::Format("bitmap PBM input is unsupported; provide 8-bit PGM".into()))
        }
        other => {
            return Err(Error::Format(format!(
                "not a PGM file (magic {:?})",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate PGM dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "PGM maxval {maxval} unsupported; only 8-bit (maxval <= 255) images are handled"
        )));
    }
    let count = width * height;
    let data: Vec<f64> = if magic == b"P5" {
        // Exactly one whitespace byte separates the header from the raster.
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(Error::Format("missing separator before PGM raster".into()));
        }
        cur.pos += 1;
        let raster = &bytes[cur.pos..];
        if raster.len() < count {
            return Err(Error::Format(format!(
                "PGM raster truncated: expected {count} bytes, found {}",
                raster.len()
            )));
        }
        if raster.len() > count {
            return Err(Error::Format(format!(
                "PGM raster has {} trailing bytes",
                raster.len() - count
            )));
        }
        raster.iter().map(|&b| f64::from(b)).collect()
    } else {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            vals.push(cur.number("sample")? as f64);
        }
        cur.skip_separators();
        if cur.pos != bytes.len() {
            return Err(Error::Format("plain PGM has trailing data after the raster".into()));
        }
        vals
    };
    if data.iter().any(|&v| v > maxval as f64) {
        return Err(Error::Format(format!("PGM sample exceeds declared maxval {maxval}")));
    }
    Tensor::from_vec(&[height, width], data)
}

/// Encode an `[H, W]` tensor as canonical binary PGM, clamping to `[0, 255]`
/// and rounding half to even.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Shape(format!(
            "can only encode nonempty [height, width] tensors, got {shape:?}"
        )));
    }
    if !image.all_finite() {
        return Err(Error::Numeric("refusing to encode non-finite pixel values".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    out.extend(image.data().iter().map(|&v| v.clamp(0.0, 255.0).round_ties_even() as u8));
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pgm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p5(header: &str, raster: &[u8]) -> Vec<u8> {
        let mut v = header.as_bytes().to_vec();
        v.extend_from_slice(raster);
        v
    }

    #[test]
    fn binary_pgm_round_trips_known_bytes() {
        let file = p5("P5\n2 2\n255\n", &[0, 128, 255, 7]);
        let t = decode_pgm(&file).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0, 255.0, 7.0]);
        assert_eq!(encode_pgm(&t).unwrap(), file);
    }

    #[test]
    fn plain_pgm_parses_with_comments() {
        let file = b"P2 # plain variant\n# full-line comment\n3 1\n255\n0 42 255\n";
        let t = decode_pgm(file).unwrap();
        assert_eq!(t.shape(), &[1, 3]);
        assert_eq!(t.data(), &[0.0, 42.0, 255.0]);
    }

    #[test]
    fn all_zero_raster_gives_all_zero_tensor() {
        let file = p5("P5\n4 2\n255\n", &[0; 8]);
        let t = decode_pgm(&file).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn color_and_deep_formats_are_rejected() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n..."), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format(_))));
        let deep = p5("P5\n1 1\n65535\n", &[0, 0]);
        assert!(matches!(decode_pgm(&deep), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"BM..."), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_oversized_rasters_are_rejected() {
        assert!(decode_pgm(&p5("P5\n2 2\n255\n", &[1, 2, 3])).is_err());
        assert!(decode_pgm(&p5("P5\n2 2\n255\n", &[1, 2, 3, 4, 5])).is_err());
    }

    #[test]
    fn plain_sample_above_maxval_is_rejected()  {
        assert!(decode_pgm(b"P2\n1 1\n100\n101\n").is_err());
    }

    #[test]
    fn encode_clamps_and_rounds_half_to_even() {
        let t = Tensor::from_vec(
            &[1, 6],
            vec![-3.0, 0.5, 1.5, 254.5, 255.9, 128.0],
        )
        .unwrap();
        let bytes = encode_pgm(&t).unwrap();
        let raster = &bytes[bytes.len() - 6..];
        assert_eq!(raster, &[0, 0, 2, 254, 255, 128]);
    }

    #[test]
    fn encode_rejects_non_finite_and_bad_shapes() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(encode_pgm(&t).is_err());
        let t3 = Tensor::zeros(&[1, 2, 2]);
        assert!(encode_pgm(&t3).is_err());
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 10.0, 20.0, 250.0, 255.0, 5.0]).unwrap();
        save_image(&t, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, t);
        let missing = load_image(Path::new("/no/such/file.pgm"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }
}
