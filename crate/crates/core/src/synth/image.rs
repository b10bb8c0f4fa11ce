use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel float image, row-major, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, fill: f64) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "image buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    /// 8-bit quantization used by the PGM writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Image after an 8-bit round trip, i.e. what a reader of the PGM sees.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes()).expect("same dims")
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_pgm())
            .map_err(|e| Error::io(path, e))
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut header = Vec::new();
        // magic, width, height, maxval: whitespace separated, '#' comments
        while header.len() < 4 {
            let mut line = String::new();
            if reader
                .read_line(&mut line)
                .map_err(|e| Error::Data(e.to_string()))?
                == 0
            {
                return Err(Error::Data("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_string));
        }
        if header[0] != "P5" || header.len() != 4 {
            return Err(Error::Data(format!("not a binary PGM header: {header:?}")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad PGM header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
        }
        let mut pixels = Vec::new();
        reader
            .read_to_end(&mut pixels)
            .map_err(|e| Error::Data(e.to_string()))?;
        if pixels.len() != w * h {
            return Err(Error::Data(format!(
                "PGM body has {} bytes, expected {}",
                pixels.len(),
                w * h
            )));
        }
        Self::from_bytes(h, w, &pixels)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let mut out = Self::new(self.height * factor, self.width * factor, 0.0);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(y, x, self.get(y / factor, x / factor));
            }
        }
        out
    }
}
