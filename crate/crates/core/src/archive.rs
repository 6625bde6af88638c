//! Manifest + payload container for named tensors.
//!
//! Layout on disk for an archive stored at `stem`:
//!
//! ```text
//! stem.manifest   # rdx-archive 1 <kind>
//!                 payload stem.bin
//!                 <name> <dtype> <d0,d1,...> <byte offset>
//! stem.bin        raw little-endian values, concatenated
//! ```
//!
//! `dtype` is one of `f32`, `f64`, `i64`. Model weights use `f32`; fitted
//! classical models also store `f64` thresholds and `i64` indices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "# rdx-archive";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" | "i64" => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    kind: String,
    entries: Vec<(String, Entry)>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Archive {
            kind: kind.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, payload: Payload) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Param(format!("archive entry name {name:?} must be non-empty without whitespace")));
        }
        let numel: usize = shape.iter().product();
        if numel != payload.len() {
            return Err(Error::shape("archive", "entry length", numel, payload.len()));
        }
        let entry = Entry { shape, payload };
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) => *slot = entry,
            None => self.entries.push((name.to_string(), entry)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Archive(vec![format!("missing entry {name}")]))
    }

    pub fn f32s(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.require(name)? {
            Entry { shape, payload: Payload::F32(v) } => Ok((shape, v)),
            e => Err(Error::Archive(vec![format!("{name}: expected f32, found {}", e.payload.dtype())])),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.require(name)? {
            Entry { shape, payload: Payload::F64(v) } => Ok((shape, v)),
            e => Err(Error::Archive(vec![format!("{name}: expected f64, found {}", e.payload.dtype())])),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.require(name)? {
            Entry { shape, payload: Payload::I64(v) } => Ok((shape, v)),
            e => Err(Error::Archive(vec![format!("{name}: expected i64, found {}", e.payload.dtype())])),
        }
    }

    pub fn manifest_path(stem: &Path) -> PathBuf {
        with_suffix(stem, "manifest")
    }

    pub fn payload_path(stem: &Path) -> PathBuf {
        with_suffix(stem, "bin")
    }

    /// Writes `stem.manifest` and `stem.bin`, each replaced atomically.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let payload_path = Self::payload_path(stem);
        let payload_name = payload_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Param(format!("bad archive path {}", stem.display())))?
            .to_string();
        let mut manifest = format!("{MAGIC} {FORMAT_VERSION} {}\npayload {payload_name}\n", self.kind);
        let mut bytes = Vec::new();
        for (name, e) in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name} {} {} {}\n", e.payload.dtype(), dims.join(","), bytes.len()));
            e.payload.write_le(&mut bytes);
        }
        write_atomic(&payload_path, &bytes)?;
        write_atomic(&Self::manifest_path(stem), manifest.as_bytes())
    }

    /// Loads from a stem or an explicit `.manifest` path.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.extension().is_some_and(|e| e == "manifest") {
            path.to_path_buf()
        } else {
            Self::manifest_path(path)
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: manifest_path.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
        let mut head = header.strip_prefix(MAGIC).ok_or_else(|| parse_err(1, "missing archive header".into()))?.split_whitespace();
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(1, "missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(parse_err(1, format!("unsupported archive version {version}")));
        }
        let kind = head.next().unwrap_or_default().to_string();
        let (_, payload_line) = lines.next().ok_or_else(|| parse_err(2, "missing payload line".into()))?;
        let payload_name = payload_line
            .strip_prefix("payload ")
            .ok_or_else(|| parse_err(2, "expected `payload <file>`".into()))?;
        let payload_path = manifest_path.with_file_name(payload_name.trim());
        let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;

        let mut archive = Archive::new(&kind);
        let mut problems = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, dims, offset] = fields[..] else {
                return Err(parse_err(idx + 1, format!("expected 4 fields, got {}", fields.len())));
            };
            let size = dtype_size(dtype).ok_or_else(|| parse_err(idx + 1, format!("unknown dtype {dtype}")))?;
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| parse_err(idx + 1, format!("bad dimension {d:?}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| parse_err(idx + 1, format!("bad offset {offset:?}")))?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * size;
            if end > bytes.len() {
                problems.push(format!(
                    "{name}: payload truncated (needs bytes {offset}..{end}, file has {})",
                    bytes.len()
                ));
                continue;
            }
            let raw = &bytes[offset..end];
            let payload = match dtype {
                "f32" => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                "f64" => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => Payload::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            archive.insert(name, shape, payload)?;
        }
        if !problems.is_empty() {
            return Err(Error::Archive(problems));
        }
        Ok(archive)
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Param(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
