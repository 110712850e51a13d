//! The DGRD raster container: named binary concept channels plus optional
//! continuous channels, with a bit-exact little-endian layout.
//!
//! Layout (version 1):
//!
//! ```text
//! magic      4 bytes   "DGRD"
//! version    u16       = 1
//! width      u32
//! height     u32
//! channels   u32       number of binary (mask) channels
//! names      channels × (u16 length ++ UTF-8 bytes)
//! data       channels × width·height bytes, row-major, values 0/1
//! [optional continuous section, present iff bytes remain]
//! n_cont     u32
//! cont       n_cont × (u16 length ++ UTF-8 name ++ width·height f32 LE)
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::primitives::value::Mask;

pub const DGRD_MAGIC: &[u8; 4] = b"DGRD";
pub const DGRD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"DGRD\"")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed raster: {0}")]
    Malformed(String),
    #[error("mask channel {channel:?} holds byte {value} (must be 0 or 1)")]
    NonBinaryCell { channel: String, value: u8 },
}

/// An in-memory multi-channel concept raster shared across evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    /// Binary concept channels, in declaration order.
    channels: Vec<(String, Arc<Vec<u8>>)>,
    /// Optional continuous channels.
    continuous: Vec<(String, Arc<Vec<f32>>)>,
}

impl Raster {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0);
        Raster {
            width,
            height,
            channels: Vec::new(),
            continuous: Vec::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cell_count(&self) -> usize {
        (self.width as usize) * (self.height as usize)
    }

    pub fn push_channel(&mut self, name: &str, cells: Vec<u8>) {
        assert_eq!(cells.len(), self.cell_count());
        assert!(cells.iter().all(|&c| c <= 1), "mask cells must be 0 or 1");
        self.channels.push((name.to_string(), Arc::new(cells)));
    }

    pub fn push_continuous(&mut self, name: &str, cells: Vec<f32>) {
        assert_eq!(cells.len(), self.cell_count());
        self.continuous.push((name.to_string(), Arc::new(cells)));
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|(n, _)| n.as_str())
    }

    pub fn channel(&self, name: &str) -> Option<&[u8]> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    /// Channel as a Mask value, or None when the concept is absent.
    pub fn channel_mask(&self, name: &str) -> Option<Mask> {
        self.channel(name)
            .map(|cells| Mask::new(self.width, self.height, cells.to_vec()))
    }

    pub fn continuous_names(&self) -> impl Iterator<Item = &str> {
        self.continuous.iter().map(|(n, _)| n.as_str())
    }

    pub fn continuous_channel(&self, name: &str) -> Option<&[f32]> {
        self.continuous
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    /// Fraction of 1-cells per binary channel, cheapest stratification input.
    pub fn channel_fractions(&self) -> BTreeMap<String, f64> {
        let total = self.cell_count() as f64;
        self.channels
            .iter()
            .map(|(n, c)| {
                let ones = c.iter().filter(|&&b| b == 1).count() as f64;
                (n.clone(), ones / total)
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.channels.len() * self.cell_count());
        out.extend_from_slice(DGRD_MAGIC);
        out.extend_from_slice(&DGRD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        for (name, _) in &self.channels {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        for (_, cells) in &self.channels {
            out.extend_from_slice(cells);
        }
        if !self.continuous.is_empty() {
            out.extend_from_slice(&(self.continuous.len() as u32).to_le_bytes());
            for (name, cells) in &self.continuous {
                let bytes = name.as_bytes();
                out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
                out.extend_from_slice(bytes);
                for v in cells.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RasterError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != DGRD_MAGIC {
            return Err(RasterError::BadMagic);
        }
        let version = cur.u16()?;
        if version != DGRD_VERSION {
            return Err(RasterError::UnsupportedVersion(version));
        }
        let width = cur.u32()?;
        let height = cur.u32()?;
        if width == 0 || height == 0 {
            return Err(RasterError::Malformed("zero dimension".into()));
        }
        let n_channels = cur.u32()? as usize;
        let cell_count = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| RasterError::Malformed("dimensions overflow".into()))?;
        let mut names = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            names.push(cur.name()?);
        }
        let mut raster = Raster::new(width, height);
        for name in names {
            let cells = cur.take(cell_count)?.to_vec();
            if let Some(&bad) = cells.iter().find(|&&c| c > 1) {
                return Err(RasterError::NonBinaryCell {
                    channel: name,
                    value: bad,
                });
            }
            raster.channels.push((name, Arc::new(cells)));
        }
        if cur.remaining() > 0 {
            let n_cont = cur.u32()? as usize;
            for _ in 0..n_cont {
                let name = cur.name()?;
                let raw = cur.take(cell_count * 4)?;
                let cells = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                raster.continuous.push((name, Arc::new(cells)));
            }
            if cur.remaining() > 0 {
                return Err(RasterError::Malformed(format!(
                    "{} trailing bytes",
                    cur.remaining()
                )));
            }
        }
        Ok(raster)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), RasterError> {
        let bytes = self.encode();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, RasterError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Raster::decode(&bytes)
    }
}

/// SHA-256 of the encoded raster bytes, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RasterError> {
        if self.pos + n > self.bytes.len() {
            return Err(RasterError::Malformed(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, RasterError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, RasterError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn name(&mut self) -> Result<String, RasterError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| RasterError::Malformed("channel name is not UTF-8".into()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
