//! RGB images with `f64` intensities in `[0, 1]`, plus binary PPM (P6) I/O.
//!
//! Pixel values are kept on the 1/255 grid by the dataset generator, so a
//! write/read round trip through 8-bit PPM is exact.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Dense RGB image; data layout is `(y, x, channel)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {}x{} needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image intensities must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let off = (y * self.width + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let off = (y * self.width + x) * 3;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }

    /// Flattens the `patch_px × patch_px` block at patch cell `(row, col)`
    /// into a `(y, x, channel)`-ordered vector.
    pub fn patch_vector(&self, row: usize, col: usize, patch_px: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(patch_px * patch_px * 3);
        for py in 0..patch_px {
            let y = row * patch_px + py;
            for px in 0..patch_px {
                let x = col * patch_px + px;
                out.extend_from_slice(&self.pixel(x, y));
            }
        }
        out
    }

    /// Zeroes the pixel block of one patch cell.
    pub fn zero_patch(&mut self, row: usize, col: usize, patch_px: usize) {
        for py in 0..patch_px {
            let y = row * patch_px + py;
            for px in 0..patch_px {
                self.set_pixel(col * patch_px + px, y, [0.0; 3]);
            }
        }
    }

    /// Copies the pixel block of one patch cell from `src`.
    pub fn copy_patch_from(&mut self, src: &Image, row: usize, col: usize, patch_px: usize) {
        for py in 0..patch_px {
            let y = row * patch_px + py;
            for px in 0..patch_px {
                let x = col * patch_px + px;
                self.set_pixel(x, y, src.pixel(x, y));
            }
        }
    }

    /// Encodes as binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_ppm(&mut f)
    }

    pub fn read_ppm(r: &mut impl Read) -> Result<Self> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let parse_err = |msg: &str| Error::Parse { line: 0, msg: msg.into() };

        // Header: magic, width, height, maxval, separated by whitespace;
        // '#' starts a comment running to end of line.
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            loop {
                while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < raw.len() && raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse { line: 0, msg: "unexpected end of PPM header".into() });
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };

        if token()? != "P6" {
            return Err(parse_err("not a binary PPM (P6) file"));
        }
        let width: usize = token()?.parse().map_err(|_| parse_err("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| parse_err("bad height"))?;
        let maxval: usize = token()?.parse().map_err(|_| parse_err("bad maxval"))?;
        if maxval != 255 {
            return Err(parse_err("only maxval 255 is supported"));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * 3;
        if raw.len() < pos + need {
            return Err(parse_err("truncated PPM pixel data"));
        }
        let data = raw[pos..pos + need].iter().map(|b| *b as f64 / 255.0).collect();
        Image::new(width, height, data)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_ppm(&mut f)
    }
}
