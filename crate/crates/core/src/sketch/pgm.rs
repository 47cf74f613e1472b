//! Portable graymap rasters and the on-disk dataset layout.
//!
//! A dataset directory holds one `img_NNNNN.pgm` per image and a
//! `labels.txt` index with lines `<file> <label>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ToyImage, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_INDEX: &str = "labels.txt";

/// Grayscale raster as read from or written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Graymap {
    /// Maps `values` linearly from `[lo, hi]` onto `0..=maxval`, clamping.
    pub fn from_values(width: usize, height: usize, values: &[f64], lo: f64, hi: f64, maxval: u16) -> Self {
        assert_eq!(values.len(), width * height);
        let m = maxval as f64;
        let pixels = values
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * m).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval,
            pixels,
        }
    }

    pub fn to_values(&self, lo: f64, hi: f64) -> Vec<f64> {
        let m = self.maxval as f64;
        self.pixels
            .iter()
            .map(|&p| lo + (hi - lo) * p as f64 / m)
            .collect()
    }

    /// Binary (`P5`) encoding with an optional comment line.
    pub fn encode(&self, comment: Option<&str>) -> Vec<u8> {
        let mut head = String::from("P5\n");
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(head, "# {line}");
            }
        }
        let _ = write!(head, "{} {}\n{}\n", self.width, self.height, self.maxval);
        let mut out = head.into_bytes();
        for &p in &self.pixels {
            if self.maxval < 256 {
                out.push(p as u8);
            } else {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }

    /// Parses binary (`P5`) or plain (`P2`) graymaps.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Raster(m.to_string());
        let mut pos = 0;
        let next_token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(bad("truncated graymap header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let magic = next_token(&mut pos)?;
        let num = |s: String| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
        let width = num(next_token(&mut pos)?)?;
        let height = num(next_token(&mut pos)?)?;
        let maxval = num(next_token(&mut pos)?)?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(bad("graymap dimensions or maxval out of range"));
        }
        let n = width * height;
        let pixels: Vec<u16> = match magic.as_str() {
            "P5" => {
                // exactly one whitespace byte separates header and raster
                let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if body.len() < need {
                    return Err(bad(&format!("raster has {} bytes, need {need}", body.len())));
                }
                if wide {
                    body[..need]
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]))
                        .collect()
                } else {
                    body[..n].iter().map(|&b| b as u16).collect()
                }
            }
            "P2" => (0..n)
                .map(|_| {
                    next_token(&mut pos)?
                        .parse::<u16>()
                        .map_err(|_| bad("bad plain pixel"))
                })
                .collect::<Result<_>>()?,
            other => return Err(bad(&format!("unsupported magic {other:?}"))),
        };
        if pixels.iter().any(|&p| p as usize > maxval) {
            return Err(bad("pixel exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            Error::Raster(m) => Error::Raster(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        fs::write(path, self.encode(comment))?;
        Ok(())
    }
}

/// Reads a 32x32 raster mapped onto `[lo, hi]`.
pub fn read_raster(path: &Path, lo: f64, hi: f64) -> Result<Tensor> {
    let g = Graymap::read(path)?;
    if g.width != IMAGE_SIZE || g.height != IMAGE_SIZE {
        return Err(Error::Raster(format!(
            "{}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            path.display(),
            g.width,
            g.height
        )));
    }
    Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], g.to_values(lo, hi))
}

/// Tiles a batch `[N, 1, H, W]` into a grid with one-pixel gutters.
pub fn grid(batch: &Tensor, columns: usize, lo: f64, hi: f64) -> Graymap {
    let s = batch.shape();
    let (n, h, w) = (s[0], s[s.len() - 2], s[s.len() - 1]);
    let cols = columns.clamp(1, n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut values = vec![lo; gw * gh];
    for k in 0..n {
        let (r, c) = (k / cols, k % cols);
        let tile = &batch.data()[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let y = r * (h + 1) + 1 + i;
            let x = c * (w + 1) + 1;
            values[y * gw + x..y * gw + x + w].copy_from_slice(&tile[i * w..(i + 1) * w]);
        }
    }
    Graymap::from_values(gw, gh, &values, lo, hi, 255)
}

/// Writes images and the label index into `dir`.
pub fn export_dataset(images: &[ToyImage], dir: &Path, comment: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for line in comment.into_iter().flat_map(str::lines) {
        let _ = writeln!(index, "# {line}");
    }
    for (i, im) in images.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        Graymap::from_values(IMAGE_SIZE, IMAGE_SIZE, im.raster.data(), -1.0, 1.0, 65535)
            .write(&dir.join(&name), comment)?;
        let _ = writeln!(index, "{name} {}", im.label);
    }
    fs::write(dir.join(LABEL_INDEX), index)?;
    Ok(())
}

/// Reads a dataset directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Vec<ToyImage>> {
    let index = fs::read_to_string(dir.join(LABEL_INDEX))?;
    let mut out = Vec::new();
    for (ln, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Raster(format!("{LABEL_INDEX}:{}: expected `<file> <label>`", ln + 1)));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Raster(format!("{LABEL_INDEX}:{}: bad label {label:?}", ln + 1)))?;
        if label >= NUM_CLASSES {
            return Err(Error::InvalidLabel {
                label,
                classes: NUM_CLASSES,
            });
        }
        let raster = read_raster(&dir.join(file), -1.0, 1.0)?;
        out.push(ToyImage::new(raster, label)?);
    }
    if out.is_empty() {
        return Err(Error::Raster(format!("{} lists no images", dir.join(LABEL_INDEX).display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::gen_dataset;

    #[test]
    fn binary_and_plain_decode_agree() {
        let g = Graymap {
            width: 3,
            height: 2,
            maxval: 255,
            pixels: vec![0, 10, 20, 30, 40, 255],
        };
        let bytes = g.encode(Some("hello"));
        assert_eq!(Graymap::decode(&bytes).unwrap(), g);
        let plain = b"P2\n# c\n3 2\n255\n0 10 20\n30 40 255\n";
        assert_eq!(Graymap::decode(plain).unwrap(), g);
    }

    #[test]
    fn wide_maxval_round_trip() {
        let g = Graymap::from_values(2, 2, &[-1.0, -0.5, 0.25, 1.0], -1.0, 1.0, 65535);
        let back = Graymap::decode(&g.encode(None)).unwrap();
        for (a, b) in back.to_values(-1.0, 1.0).iter().zip([-1.0, -0.5, 0.25, 1.0]) {
            assert!((a - b).abs() < 2.0 / 65535.0);
        }
    }

    #[test]
    fn malformed_rejected() {
        assert!(Graymap::decode(b"P6\n1 1\n255\n\0").is_err());
        assert!(Graymap::decode(b"P5\n4 4\n255\n\0\0").is_err());
        assert!(Graymap::decode(b"P5\n").is_err());
        assert!(Graymap::decode(b"P2\n1 1\n10\n11\n").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = gen_dataset(6, 3);
        export_dataset(&images, dir.path(), Some("test")).unwrap();
        let index = fs::read_to_string(dir.path().join(LABEL_INDEX)).unwrap();
        assert!(index.starts_with("# test\n"));
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert!(a.raster.sub(&b.raster).unwrap().max_abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn grid_layout() {
        let batch = Tensor::full(vec![3, 1, 2, 2], 1.0);
        let g = grid(&batch, 2, -1.0, 1.0);
        assert_eq!((g.width, g.height), (7, 7));
        assert_eq!(g.pixels[7 + 1], 255);
        assert_eq!(g.pixels[0], 0);
    }
}
