//! Indexed binary store of precomputed teacher frame embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "W2VE" | u32 version=1 | u32 record count
//! record*: u16 id length | id (UTF-8) | u32 frames | u32 dim (768) | u32 CRC32(payload) | f32 payload[frames*dim]
//! index:   u32 count | (u16 id length | id | u64 record offset)*
//! u64 index offset
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"W2VE";
pub const VERSION: u32 = 1;
pub const TEACHER_DIM: usize = 768;
const HEADER_LEN: u64 = 12;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format { kind: "teacher store", detail: detail.into() }
}

/// Frame-level teacher representation, `frames × 768`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbedding {
    pub frames: usize,
    pub data: Vec<f32>,
}

impl TeacherEmbedding {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * TEACHER_DIM {
            return Err(Error::contract(format!(
                "{frames} teacher frames need {} values, got {}",
                frames * TEACHER_DIM,
                data.len()
            )));
        }
        Ok(Self { frames, data })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.frames, TEACHER_DIM], self.data.clone()).expect("sized at construction")
    }

    /// Payload size in bytes.
    pub fn payload_len(&self) -> usize {
        self.data.len() * 4
    }
}

fn payload_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Streams records into a new store file.
pub struct TeacherStoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    pos: u64,
    index: Vec<(String, u64)>,
    seen: HashMap<String, ()>,
}

impl TeacherStoreWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self { path, out: BufWriter::new(file), pos: 0, index: Vec::new(), seen: HashMap::new() };
        w.put(MAGIC)?;
        w.put(&VERSION.to_le_bytes())?;
        w.put(&0u32.to_le_bytes())?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.out.write_all(bytes).map_err(|e| Error::io(&self.path, e))?;
        self.pos += bytes.len() as u64;
        Ok(())
    }

    /// Appends one record; ids must be unique.
    pub fn append(&mut self, id: &str, emb: &TeacherEmbedding) -> Result<()> {
        if self.seen.insert(id.to_owned(), ()).is_some() {
            return Err(Error::contract(format!("duplicate teacher id `{id}`")));
        }
        let id_len = u16::try_from(id.len()).map_err(|_| Error::contract("teacher id longer than 65535 bytes"))?;
        let payload = payload_bytes(&emb.data);
        self.index.push((id.to_owned(), self.pos));
        self.put(&id_len.to_le_bytes())?;
        self.put(id.as_bytes())?;
        self.put(&(emb.frames as u32).to_le_bytes())?;
        self.put(&(TEACHER_DIM as u32).to_le_bytes())?;
        self.put(&crc32fast::hash(&payload).to_le_bytes())?;
        self.put(&payload)
    }

    /// Writes the index and footer and patches the record count.
    pub fn finish(mut self) -> Result<PathBuf> {
        let index_offset = self.pos;
        let entries = std::mem::take(&mut self.index);
        self.put(&(entries.len() as u32).to_le_bytes())?;
        for (id, offset) in &entries {
            self.put(&(id.len() as u16).to_le_bytes())?;
            self.put(id.as_bytes())?;
            self.put(&offset.to_le_bytes())?;
        }
        self.put(&index_offset.to_le_bytes())?;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&self.path, e.into_error()))?;
        file.seek(SeekFrom::Start(8)).map_err(|e| Error::io(&self.path, e))?;
        file.write_all(&(entries.len() as u32).to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        file.sync_all().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

/// Writes `records` to `path` in order.
pub fn write_store<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = (&'a str, &'a TeacherEmbedding)>,
) -> Result<PathBuf> {
    let mut w = TeacherStoreWriter::create(path)?;
    for (id, emb) in records {
        w.append(id, emb)?;
    }
    w.finish()
}

/// Read handle: the index is held in memory, payloads are read on demand.
#[derive(Debug)]
pub struct TeacherStore {
    path: PathBuf,
    file: Mutex<File>,
    len: u64,
    record_count: u32,
    index: BTreeMap<String, u64>,
    order: Vec<(String, u64)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn id(&mut self) -> Result<String> {
        let n = self.u16("id length")? as usize;
        String::from_utf8(self.take(n, "id")?.to_vec()).map_err(|_| format_err("id is not UTF-8"))
    }
}

impl TeacherStore {
    /// Opens a store and loads its index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let read_at = |file: &mut File, offset: u64, n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            file.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&path, e))?;
            file.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
            Ok(buf)
        };
        if len < HEADER_LEN + 12 {
            return Err(format_err(format!("{len} bytes is shorter than header and footer")));
        }
        let header = read_at(&mut file, 0, HEADER_LEN as usize)?;
        if &header[..4] != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let record_count = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let footer = read_at(&mut file, len - 8, 8)?;
        let index_offset = u64::from_le_bytes(footer.try_into().unwrap());
        if index_offset < HEADER_LEN || index_offset > len - 12 {
            return Err(format_err(format!("index offset {index_offset} outside file of {len} bytes")));
        }
        let raw = read_at(&mut file, index_offset, (len - 8 - index_offset) as usize)?;
        let mut cur = Cursor { bytes: &raw, pos: 0 };
        let count = cur.u32("index count")?;
        if count != record_count {
            return Err(format_err(format!("header lists {record_count} records, index {count}")));
        }
        let mut order = Vec::with_capacity(count as usize);
        let mut index = BTreeMap::new();
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            let id = cur.id()?;
            let offset = cur.u64("record offset")?;
            if prev.is_some_and(|p| offset <= p) || offset < HEADER_LEN || offset >= index_offset {
                return Err(format_err(format!("index offset {offset} for `{id}` is out of order or range")));
            }
            prev = Some(offset);
            if index.insert(id.clone(), offset).is_some() {
                return Err(format_err(format!("duplicate id `{id}` in index")));
            }
            order.push((id, offset));
        }
        if cur.pos != raw.len() {
            return Err(format_err("trailing bytes after index"));
        }
        Ok(Self { path, file: Mutex::new(file), len, record_count, index, order })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.record_count == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Byte offset of a record.
    pub fn offset(&self, id: &str) -> Option<u64> {
        self.index.get(id).copied()
    }

    /// Ids in file order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|(id, _)| id.as_str())
    }

    fn read_bytes(&self, offset: u64, n: usize) -> Result<Vec<u8>> {
        if offset + n as u64 > self.len {
            return Err(format_err(format!("record at {offset} runs past end of file")));
        }
        let mut buf = vec![0u8; n];
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&self.path, e))?;
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    fn read_record(&self, id: &str, offset: u64) -> Result<TeacherEmbedding> {
        let integrity = |detail: String| Error::Integrity { id: id.to_owned(), detail };
        let head_len = 2 + id.len() + 12;
        let head = self.read_bytes(offset, head_len)?;
        let mut cur = Cursor { bytes: &head, pos: 0 };
        let stored_id = cur.id()?;
        if stored_id != id {
            return Err(integrity(format!("index points at record `{stored_id}`")));
        }
        let frames = cur.u32("frames")? as usize;
        let dim = cur.u32("dim")? as usize;
        let crc = cur.u32("crc")?;
        if dim != TEACHER_DIM {
            return Err(integrity(format!("dimension {dim}, expected {TEACHER_DIM}")));
        }
        let payload = self.read_bytes(offset + head_len as u64, frames * dim * 4)?;
        if crc32fast::hash(&payload) != crc {
            return Err(integrity("payload checksum mismatch".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        TeacherEmbedding::new(frames, data)
    }

    /// Looks up and validates one record.
    pub fn read(&self, id: &str) -> Result<TeacherEmbedding> {
        let offset = self
            .offset(id)
            .ok_or_else(|| Error::NotFound(format!("teacher embedding `{id}`")))?;
        self.read_record(id, offset)
    }

    /// Checks every record: header fields, dimension, checksum and that
    /// records tile the file between header and index.
    pub fn verify(&self) -> VerifyReport {
        let mut report = VerifyReport { records: self.order.len(), ..VerifyReport::default() };
        for (id, offset) in &self.order {
            match self.read_record(id, *offset) {
                Ok(e) => *report.frame_histogram.entry(e.frames).or_default() += 1,
                Err(e) => report.failures.push((id.clone(), e.to_string())),
            }
        }
        report
    }
}

/// Outcome of [`TeacherStore::verify`] / [`verify_store`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub records: usize,
    pub frame_histogram: BTreeMap<usize, usize>,
    /// `(id, reason)` per failing record, or `("<file>", reason)` when the
    /// file itself cannot be opened.
    pub failures: Vec<(String, String)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Opens and fully verifies a store file.
pub fn verify_store(path: impl AsRef<Path>) -> VerifyReport {
    match TeacherStore::open(path) {
        Ok(store) => store.verify(),
        Err(e) => VerifyReport { failures: vec![("<file>".into(), e.to_string())], ..VerifyReport::default() },
    }
}
