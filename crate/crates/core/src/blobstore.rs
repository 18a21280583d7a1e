//! File-backed, content-addressed object storage and the `RTMB` grid format.
//!
//! Blobs live at `<root>/<id[0..2]>/<id>` where `id` is the lowercase hex
//! SHA-256 of the bytes. Writes go to `<root>/tmp/` first and are renamed
//! into place, so concurrent writers (threads or processes) never expose a
//! partial file.
//!
//! # RTMB layout
//!
//! All fields little-endian, 64-byte header followed by the payload:
//!
//! | offset | size | field                                  |
//! |-------:|-----:|----------------------------------------|
//! |      0 |    4 | magic `b"RTMB"`                        |
//! |      4 |    2 | format version (`1`)                   |
//! |      6 |    2 | kind tag (see [`BlobKind`])            |
//! |      8 |    8 | `nz` (u64)                             |
//! |     16 |    8 | `nx` (u64)                             |
//! |     24 |    8 | `dz` (f64)                             |
//! |     32 |    8 | `dx` (f64)                             |
//! |     40 |    8 | `oz` (f64)                             |
//! |     48 |    8 | `ox` (f64)                             |
//! |     56 |    8 | `leaf_count` (u64)                     |
//! |     64 | 8·nz·nx | payload, row-major f64          |

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::survey::VelocityModel2D;
use crate::wavekernel::{ImageGrid, ShotRecord};

pub const MAGIC: [u8; 4] = *b"RTMB";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(BlobId),
    #[error("blob {id} is corrupt: stored bytes hash to {actual}")]
    Corrupt { id: BlobId, actual: BlobId },
    #[error("malformed blob id {0:?}")]
    BadId(String),
    #[error("refusing to store an empty blob")]
    Empty,
    #[error("blob store I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("unknown kind tag {0}")]
    BadKind(u16),
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid header: {0}")]
    BadHeader(String),
}

/// Hex SHA-256 digest naming a blob.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlobId(String);

impl BlobId {
    pub fn of(bytes: &[u8]) -> Self {
        BlobId(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for BlobId {
    type Err = BlobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 64
            && s.bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            Ok(BlobId(s.to_owned()))
        } else {
            Err(BlobError::BadId(s.to_owned()))
        }
    }
}

impl TryFrom<String> for BlobId {
    type Error = BlobError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BlobId> for String {
    fn from(id: BlobId) -> String {
        id.0
    }
}

impl fmt::Display for BlobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Content-addressed store rooted at a directory.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BlobError> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &BlobId) -> PathBuf {
        self.root.join(&id.0[..2]).join(&id.0)
    }

    pub fn contains(&self, id: &BlobId) -> bool {
        self.path_of(id).is_file()
    }

    pub fn put(&self, bytes: &[u8]) -> Result<BlobId, BlobError> {
        if bytes.is_empty() {
            return Err(BlobError::Empty);
        }
        let id = BlobId::of(bytes);
        let dest = self.path_of(&id);
        if dest.is_file() {
            return Ok(id);
        }
        fs::create_dir_all(dest.parent().expect("blob path has a parent"))?;
        let tmp = self
            .root
            .join("tmp")
            .join(uuid::Uuid::new_v4().simple().to_string());
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        // Renaming over an identical blob written concurrently is harmless.
        if let Err(e) = fs::rename(&tmp, &dest) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(id)
    }

    pub fn get(&self, id: &BlobId) -> Result<Vec<u8>, BlobError> {
        let bytes = match fs::read(self.path_of(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BlobError::NotFound(id.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = BlobId::of(&bytes);
        if &actual != id {
            return Err(BlobError::Corrupt {
                id: id.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Number of stored blobs, for tests and reports.
    pub fn len(&self) -> Result<usize, BlobError> {
        let mut n = 0;
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            if entry.file_type()?.is_dir() && name.len() == 2 {
                n += fs::read_dir(entry.path())?.count();
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool, BlobError> {
        Ok(self.len()? == 0)
    }
}

/// What a grid blob holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    /// Partial or final image; `leaf_count >= 1`.
    Image = 1,
    /// Velocity model in m/s; `leaf_count = 0`.
    Velocity = 2,
    /// Shot traces: rows are receivers, columns time samples, `dx = dt`.
    Traces = 3,
}

impl BlobKind {
    fn from_tag(tag: u16) -> Result<Self, FormatError> {
        match tag {
            1 => Ok(BlobKind::Image),
            2 => Ok(BlobKind::Velocity),
            3 => Ok(BlobKind::Traces),
            other => Err(FormatError::BadKind(other)),
        }
    }
}

/// A gridded array plus the metadata needed to sum and locate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBlob {
    pub kind: BlobKind,
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    pub oz: f64,
    pub ox: f64,
    pub leaf_count: u64,
    pub values: Vec<f64>,
}

impl ImageBlob {
    pub fn from_image(image: &ImageGrid, leaf_count: u64) -> Self {
        Self {
            kind: BlobKind::Image,
            nz: image.nz,
            nx: image.nx,
            dz: image.dz,
            dx: image.dx,
            oz: image.oz,
            ox: image.ox,
            leaf_count,
            values: image.values.clone(),
        }
    }

    pub fn from_velocity(model: &VelocityModel2D) -> Self {
        Self {
            kind: BlobKind::Velocity,
            nz: model.nz,
            nx: model.nx,
            dz: model.dz,
            dx: model.dx,
            oz: model.oz,
            ox: model.ox,
            leaf_count: 0,
            values: model.v.clone(),
        }
    }

    /// Traces only; receiver positions travel with the shot plan.
    pub fn from_traces(record: &ShotRecord) -> Self {
        Self {
            kind: BlobKind::Traces,
            nz: record.receivers.len(),
            nx: record.nt,
            dz: 1.0,
            dx: record.dt,
            oz: 0.0,
            ox: 0.0,
            leaf_count: 0,
            values: record.traces.clone(),
        }
    }

    pub fn to_image(&self) -> ImageGrid {
        ImageGrid {
            nz: self.nz,
            nx: self.nx,
            dz: self.dz,
            dx: self.dx,
            oz: self.oz,
            ox: self.ox,
            values: self.values.clone(),
        }
    }

    pub fn to_velocity(&self) -> Result<VelocityModel2D, FormatError> {
        if self.kind != BlobKind::Velocity {
            return Err(FormatError::BadHeader(format!(
                "expected a velocity blob, found {:?}",
                self.kind
            )));
        }
        VelocityModel2D::new(
            self.nz,
            self.nx,
            self.dz,
            self.dx,
            self.oz,
            self.ox,
            self.values.clone(),
        )
        .map_err(|e| FormatError::BadHeader(e.to_string()))
    }

    pub fn same_grid(&self, other: &ImageBlob) -> bool {
        self.nz == other.nz
            && self.nx == other.nx
            && self.dz == other.dz
            && self.dx == other.dx
            && self.oz == other.oz
            && self.ox == other.ox
    }
}

pub fn encode_image(blob: &ImageBlob) -> Result<Vec<u8>, FormatError> {
    if blob.values.len() != blob.nz * blob.nx {
        return Err(FormatError::Length {
            expected: blob.nz * blob.nx,
            got: blob.values.len(),
        });
    }
    if blob.kind == BlobKind::Image && blob.leaf_count == 0 {
        return Err(FormatError::BadHeader(
            "image blobs need leaf_count >= 1".into(),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * blob.values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.kind as u16).to_le_bytes());
    out.extend_from_slice(&(blob.nz as u64).to_le_bytes());
    out.extend_from_slice(&(blob.nx as u64).to_le_bytes());
    for f in [blob.dz, blob.dx, blob.oz, blob.ox] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&blob.leaf_count.to_le_bytes());
    for v in &blob.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBlob, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Length {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let kind = BlobKind::from_tag(u16_at(6))?;
    let nz =
        usize::try_from(u64_at(8)).map_err(|_| FormatError::BadHeader("nz overflows".into()))?;
    let nx =
        usize::try_from(u64_at(16)).map_err(|_| FormatError::BadHeader("nx overflows".into()))?;
    let cells = nz
        .checked_mul(nx)
        .ok_or_else(|| FormatError::BadHeader("nz*nx overflows".into()))?;
    let expected = cells
        .checked_mul(8)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::BadHeader("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(FormatError::Length {
            expected,
            got: bytes.len(),
        });
    }
    let leaf_count = u64_at(56);
    if kind == BlobKind::Image && leaf_count == 0 {
        return Err(FormatError::BadHeader(
            "image blob with leaf_count 0".into(),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageBlob {
        kind,
        nz,
        nx,
        dz: f64_at(24),
        dx: f64_at(32),
        oz: f64_at(40),
        ox: f64_at(48),
        leaf_count,
        values,
    })
}
