//! File formats: binary PGM (`P5`) label masks, raw little-endian `f64`
//! fields with an `LSV1` header, string CSV tables, and atomic file
//! replacement.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale image whose pixel values are class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl PgmImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Format(format!(
                "{width}x{height} image cannot hold {} pixels",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_labels(width: usize, height: usize, labels: &[usize]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&l| {
                u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(width, height, data)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&b| b as usize).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let magic = header_token(&mut r)?;
        if magic != "P5" {
            return Err(Error::Format(format!("expected P5 magic, found {magic:?}")));
        }
        let mut number = |what: &str| -> Result<usize> {
            let tok = header_token(&mut r)?;
            tok.parse()
                .map_err(|_| Error::Format(format!("bad PGM {what}: {tok:?}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 is supported, found {maxval}")));
        }
        let mut data = vec![0u8; width * height];
        r.read_exact(&mut data)
            .map_err(|_| Error::Format("truncated PGM raster".into()))?;
        Self::new(width, height, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        write_atomic(path, &buf)
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes exactly one trailing whitespace byte.
fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PGM header".into()));
            }
            return Ok(tok);
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut comment = Vec::new();
            r.read_until(b'\n', &mut comment)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(b as char);
    }
}

pub const LSV_MAGIC: &[u8; 4] = b"LSV1";

/// Row-major `height × width × channels` array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatField {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f64>,
}

impl FloatField {
    pub fn new(height: u32, width: u32, channels: u32, data: Vec<f64>) -> Result<Self> {
        let expected = height as usize * width as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "{height}x{width}x{channels} field cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// 16-byte header (`LSV1`, then `u32` height, width, channels, all
    /// little-endian) followed by the values as little-endian `f64`.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(LSV_MAGIC)?;
        for v in [self.height, self.width, self.channels] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::Format("truncated LSV1 header".into()))?;
        if &header[..4] != LSV_MAGIC {
            return Err(Error::Format("missing LSV1 magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
        let (height, width, channels) = (word(1), word(2), word(3));
        let n = height as usize * width as usize * channels as usize;
        let mut raw = vec![0u8; n * 8];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated LSV1 payload".into()))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        self.write(&mut buf)?;
        write_atomic(path, &buf)
    }
}

/// A header and string rows, for small ad-hoc CSV outputs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; panics if its width differs from the header's.
    pub fn push<I, T>(&mut self, row: I)
    where
        I: IntoIterator<Item = T>,
        T: ToString,
    {
        let row: Vec<String> = row.into_iter().map(|v| v.to_string()).collect();
        assert_eq!(row.len(), self.header.len(), "row width does not match header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
