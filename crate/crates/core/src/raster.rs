//! Dense per-pixel rasters and their on-disk container.
//!
//! File layout: 4 magic bytes (`DPR1` for depth, `PRB1` for probability or
//! confidence), little-endian `u32` width, `u32` height, then `width * height`
//! little-endian `f32` values, row-major from the top-left pixel.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const DEPTH_MAGIC: [u8; 4] = *b"DPR1";
pub const PROB_MAGIC: [u8; 4] = *b"PRB1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad raster magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("raster payload truncated: expected {expected} values")]
    Truncated { expected: usize },
    #[error("raster size mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterKind {
    Depth,
    Probability,
}

impl RasterKind {
    pub fn magic(self) -> [u8; 4] {
        match self {
            RasterKind::Depth => DEPTH_MAGIC,
            RasterKind::Probability => PROB_MAGIC,
        }
    }
}

/// Row-major raster. Values are held as `f64` but are always representable
/// as `f32`, so they survive a round trip through the file container.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value as f32 as f64; (width as usize) * (height as usize)],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(RasterError::Shape(format!(
                "{} values for a {}x{} raster",
                data.len(),
                width,
                height
            )));
        }
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[self.index(u, v)]
    }

    pub fn set(&mut self, u: u32, v: u32, value: f64) {
        let i = self.index(u, v);
        self.data[i] = value as f32 as f64;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v) as f32 as f64).collect(),
        }
    }

    /// Like [`Raster::map`] but keeps full `f64` precision. Values produced
    /// this way are not guaranteed to survive a file round trip.
    pub fn map_exact(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write, kind: RasterKind) -> io::Result<()> {
        w.write_all(&kind.magic())?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, kind: RasterKind) -> Result<Self, RasterError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != kind.magic() {
            return Err(RasterError::BadMagic {
                found: magic,
                expected: kind.magic(),
            });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let width = u32::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let height = u32::from_le_bytes(word);
        let n = width as usize * height as usize;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => RasterError::Truncated { expected: n },
            _ => RasterError::Io(e),
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: &Path, kind: RasterKind) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, kind)?;
        w.flush()
    }

    pub fn load(path: &Path, kind: RasterKind) -> Result<Self, RasterError> {
        Self::read_from(BufReader::new(File::open(path)?), kind)
    }
}
