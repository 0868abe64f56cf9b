use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::PoseEnergy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum View {
    Ap,
    Ml,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub specimen_id: u32,
    pub view: View,
    pub pose: PoseEnergy,
    /// Shrink coefficients applied to the AP and ML content. Single-view
    /// images only use their own entry.
    pub scale: [f64; 2],
}

/// Grayscale projection, row-major with row 0 at the proximal end.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiographImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub meta: ImageMeta,
}

impl RadiographImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, meta: ImageMeta) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("pixel value {v} outside [0, 1]")));
        }
        if meta.view == View::Combined && width % 2 != 0 {
            return Err(Error::Shape("combined image width must be even".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            meta,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// 16-bit binary PGM, big-endian samples, maxval 65535.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 2);
        for &v in &self.pixels {
            let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_pgm<R: Read>(mut r: R, meta: ImageMeta) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format("PGM", 0, e.to_string()))?;
        let mut pos = 0usize;
        let token = |pos: &mut usize| -> Result<String> {
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
                return Err(Error::format("PGM", start as u64, "truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&mut pos)? != "P5" {
            return Err(Error::format("PGM", 0, "expected P5 magic"));
        }
        let num = |pos: &mut usize| -> Result<usize> {
            let at = *pos as u64;
            token(pos)?
                .parse()
                .map_err(|_| Error::format("PGM", at, "expected an integer"))
        };
        let width = num(&mut pos)?;
        let height = num(&mut pos)?;
        let maxval = num(&mut pos)?;
        if maxval != 65535 {
            return Err(Error::format(
                "PGM",
                pos as u64,
                format!("maxval {maxval}, expected 65535"),
            ));
        }
        pos += 1;
        let need = width * height * 2;
        if bytes.len() < pos + need {
            return Err(Error::format(
                "PGM",
                bytes.len() as u64,
                format!("expected {need} sample bytes"),
            ));
        }
        let pixels = bytes[pos..pos + need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect();
        Self::new(width, height, pixels, meta)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_pgm(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path, meta: ImageMeta) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_pgm(BufReader::new(file), meta)
    }

    /// Rounds pixels to the 16-bit grid used on disk.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = ((*v as f64 * 65535.0).round() as u16) as f32 / 65535.0;
        }
        self
    }
}
