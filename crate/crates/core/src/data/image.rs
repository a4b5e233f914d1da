use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let mut reader = BufReader::new(bytes);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::Malformed(format!("ppm header: {e}")))?;
            if n == 0 {
                return Err(Error::Truncated("ppm header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P6" {
            return Err(Error::BadMagic { expected: "P6" });
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Malformed(format!("ppm header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 || fields.len() != 4 {
            return Err(Error::Malformed("only 8-bit single-image PPM is supported".into()));
        }
        let mut pixels = vec![0; width * height * 3];
        reader
            .read_exact(&mut pixels)
            .map_err(|_| Error::Truncated("ppm pixels"))?;
        Ok(Image { width, height, pixels })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }

    /// Pixel values scaled to `[-1, 1]`, channel-interleaved.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect()
    }
}
