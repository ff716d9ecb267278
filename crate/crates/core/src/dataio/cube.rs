//! Binary cube (`MMRS`) and label map (`MMLB`) files.
//!
//! Cube layout: `"MMRS"`, version `u8 = 1`, dtype `u8 = 1` (float32), two
//! reserved zero bytes, then little-endian `u32` height, width, channels,
//! followed by `H·W·C` little-endian `f32` values, pixel-major with the
//! channel index fastest.
//!
//! Label layout: `"MMLB"`, version `u8 = 1`, three reserved zero bytes,
//! little-endian `u32` height and width, then `H·W` little-endian `i32`
//! labels (`-1` = unlabeled).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"MMRS";
pub const LABEL_MAGIC: &[u8; 4] = b"MMLB";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const CUBE_HEADER_LEN: usize = 20;
pub const LABEL_HEADER_LEN: usize = 16;

/// One modality's image volume, band-interleaved by pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl Cube {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "cube extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "cube {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cube value {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Spectral vector at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.values[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = (row * self.width + col) * self.channels;
        &mut self.values[o..o + self.channels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&[FORMAT_VERSION, DTYPE_F32, 0, 0]);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CUBE_MAGIC)?;
        r.expect_u8(FORMAT_VERSION, "version")?;
        r.expect_u8(DTYPE_F32, "dtype")?;
        r.skip(2)?;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!("zero extent in {h}x{w}x{c}"),
            });
        }
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| Error::Format {
                offset: 8,
                message: "extent overflow".into(),
            })?;
        r.expect_payload(n, 4)?;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(r.take4()?);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: (CUBE_HEADER_LEN + 4 * i) as u64,
                    message: "non-finite cube value".into(),
                });
            }
            values.push(v);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            values,
        })
    }
}

/// Per-pixel class ids; `-1` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}x{width} with {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < -1) {
            return Err(Error::invalid(format!("label {bad} is below -1")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        let l = self.labels[row * self.width + col];
        (l >= 0).then_some(l as usize)
    }

    /// Number of classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Checks that every label is below `k`.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= k as i32) {
            Some(l) => Err(Error::invalid(format!("label {l} out of range for {k} classes"))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + 4 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&[FORMAT_VERSION, 0, 0, 0]);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LABEL_MAGIC)?;
        r.expect_u8(FORMAT_VERSION, "version")?;
        r.skip(3)?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        if h == 0 || w == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!("zero extent in {h}x{w}"),
            });
        }
        let n = h * w;
        r.expect_payload(n, 4)?;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let l = i32::from_le_bytes(r.take4()?);
            if l < -1 {
                return Err(Error::Format {
                    offset: (LABEL_HEADER_LEN + 4 * i) as u64,
                    message: format!("label {l} below -1"),
                });
            }
            labels.push(l);
        }
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().expect("4 bytes"))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn expect_u8(&mut self, want: u8, what: &str) -> Result<()> {
        let got = self.take(1)?[0];
        if got != want {
            self.pos -= 1;
            return Err(self.err(format!("unsupported {what} {got}, expected {want}")));
        }
        Ok(())
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }

    fn expect_payload(&self, count: usize, width: usize) -> Result<()> {
        let need = count.saturating_mul(width);
        let have = self.bytes.len() - self.pos;
        if have < need {
            return Err(self.err(format!("truncated payload: header declares {need} bytes, file has {have}")));
        }
        if have > need {
            return Err(Error::Format {
                offset: (self.pos + need) as u64,
                message: format!("{} trailing bytes after payload", have - need),
            });
        }
        Ok(())
    }
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Cube::from_bytes(&bytes)
}

pub fn save_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelMap::from_bytes(&bytes)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels.to_bytes()).map_err(|e| Error::io(path, e))
}
