//! Binary matrix container.
//!
//! Layout: magic `AASV`, little-endian `u32` version (= 1), then tensor
//! records until end of file. Each record is a `u32` name length, the raw
//! name bytes, `u32` rows, `u32` cols, and `rows * cols` little-endian
//! `f64` values in row-major order. Numeric content round-trips
//! bit-exactly.

use crate::matrix::Matrix;
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"AASV";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum ContainerError {
    /// Bad magic, wrong version, truncation, or malformed record.
    Corrupt { detail: String },
    Io(io::Error),
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Corrupt { detail } => write!(f, "corrupt container: {detail}"),
            ContainerError::Io(e) => write!(f, "container i/o error: {e}"),
        }
    }
}

impl std::error::Error for ContainerError {}

impl From<io::Error> for ContainerError {
    fn from(e: io::Error) -> Self {
        ContainerError::Io(e)
    }
}

fn corrupt(detail: impl Into<String>) -> ContainerError {
    ContainerError::Corrupt { detail: detail.into() }
}

/// An ordered set of named matrices.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, matrix: Matrix) {
        self.entries.push((name.into(), matrix));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, m) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for &x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("missing magic"))?;
        if magic != MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version).map_err(|_| corrupt("missing version"))?;
        let version = u32::from_le_bytes(version);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mut entries = Vec::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read(&mut len_buf[..1])? {
                0 => break, // clean end of file
                _ => r.read_exact(&mut len_buf[1..]).map_err(|_| corrupt("truncated name length"))?,
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            if name_len > 1 << 16 {
                return Err(corrupt(format!("implausible name length {name_len}")));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name is not utf-8"))?;
            let mut dims = [0u8; 8];
            r.read_exact(&mut dims).map_err(|_| corrupt("truncated dims"))?;
            let rows = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| corrupt(format!("truncated data for tensor '{name}'")))?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = Matrix::from_vec(rows, cols, data)
                .map_err(|e| corrupt(format!("tensor '{name}': {e}")))?;
            entries.push((name, m));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        // Write-to-temp then rename, so failures never leave partial files.
        let tmp = temp_sibling(path);
        {
            let mut f = File::create(&tmp)?;
            self.write_to(&mut f)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let mut f = File::open(path)?;
        Container::read_from(&mut f)
    }
}

/// Temp path next to the target, so the final rename stays on one
/// filesystem.
pub fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
