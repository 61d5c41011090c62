//! 8-bit grayscale rasters and binary PGM (P5) I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape {
                context: "raster pixel count",
                expected: vec![height, width],
                actual: vec![pixels.len()],
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// `size_x × size_y` window at `(x0, y0)`; pixels past the right/bottom edge read as zero.
    pub fn crop_padded(&self, x0: usize, y0: usize, size_x: usize, size_y: usize) -> GrayImage {
        let mut out = GrayImage::new(size_x, size_y);
        if x0 >= self.width || y0 >= self.height {
            return out;
        }
        let copy_w = size_x.min(self.width - x0);
        for y in 0..size_y.min(self.height - y0) {
            let src = &self.pixels[(y0 + y) * self.width + x0..][..copy_w];
            out.pixels[y * size_x..y * size_x + copy_w].copy_from_slice(src);
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "PGM",
            path: path.to_path_buf(),
            reason,
        };
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and `#` comments between header tokens
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
        }
        if fields[0] != "P5" {
            return Err(bad(format!("expected magic P5, found {:?}", fields[0])));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad {what} {s:?}")))
        };
        let width = parse(fields[1], "width")?;
        let height = parse(fields[2], "height")?;
        let maxval = parse(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(bad(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the samples
        pos += 1;
        let data = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| bad("truncated pixel data".into()))?;
        if pos + width * height != bytes.len() {
            return Err(bad("trailing bytes after pixel data".into()));
        }
        GrayImage::from_pixels(width, height, data.to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_is_exact() {
        let img = GrayImage::filled(64, 64, 7);
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(bytes.len(), b"P5\n64 64\n255\n".len() + 4096);
    }

    #[test]
    fn pgm_with_comment_parses() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 250]);
        let img = GrayImage::from_pgm(&bytes, Path::new("t.pgm")).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[1, 250]);
    }

    #[test]
    fn pgm_rejects_truncation_and_other_magic() {
        assert!(GrayImage::from_pgm(b"P5\n2 2\n255\n\x01", Path::new("t")).is_err());
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n\x01", Path::new("t")).is_err());
        assert!(GrayImage::from_pgm(b"P5\n1 1\n65535\n\x01\x01", Path::new("t")).is_err());
    }

    #[test]
    fn crop_pads_past_edges() {
        let img = GrayImage::from_pixels(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let c = img.crop_padded(1, 1, 3, 2);
        assert_eq!(c.pixels(), &[5, 6, 0, 0, 0, 0]);
    }
}
