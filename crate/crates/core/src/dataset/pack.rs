//! Flat indexed record container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SKLP" | u32 version | u32 record count | u16 height | u16 width | u8 channels
//! index: record count x (u64 offset | u32 length | u16 class id | u32 crc32)
//! records: raw 8-bit HWC pixels, back to back
//! ```
//!
//! Offsets are absolute file positions.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{DatasetError, Manifest, ManifestEntry, Split};
use crate::image::{load_image_as, resize_bilinear, ColorMode, ImageTensor};
use crate::parallel::{try_map_indexed, Exec};
use crate::rng::{streams, SeededRng};

pub const PACK_MAGIC: [u8; 4] = *b"SKLP";
pub const PACK_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1;
const INDEX_ENTRY_LEN: usize = 8 + 4 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackHeader {
    pub version: u32,
    pub record_count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
}

impl PackHeader {
    pub fn record_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub offset: u64,
    pub length: u32,
    pub class_id: u16,
    pub checksum: u32,
}

/// Target geometry of packed records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug)]
enum Storage {
    Memory(Vec<u8>),
    File(File),
}

/// An opened or freshly built pack. Safe to read from many threads.
#[derive(Debug)]
pub struct PackFile {
    header: PackHeader,
    index: Vec<IndexEntry>,
    storage: Storage,
}

/// Anything that can hand out `(image, class id)` records by index.
pub trait RecordSource: Sync {
    fn len(&self) -> usize;
    fn record(&self, idx: usize) -> Result<(ImageTensor, usize), DatasetError>;
    /// `(height, width, channels)` of every record.
    fn dims(&self) -> (usize, usize, usize);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PackFile {
    /// Serializes `(pixels, class id)` records; every payload must have the
    /// length implied by `spec`.
    pub fn from_records(spec: PackSpec, records: &[(Vec<u8>, usize)]) -> Result<Self, DatasetError> {
        let header = header_for(spec, records.len())?;
        let rec_len = header.record_len();
        let mut bytes = Vec::with_capacity(HEADER_LEN + records.len() * (INDEX_ENTRY_LEN + rec_len));
        bytes.extend_from_slice(&PACK_MAGIC);
        bytes.extend_from_slice(&header.version.to_le_bytes());
        bytes.extend_from_slice(&header.record_count.to_le_bytes());
        bytes.extend_from_slice(&header.height.to_le_bytes());
        bytes.extend_from_slice(&header.width.to_le_bytes());
        bytes.push(header.channels);
        let mut offset = (HEADER_LEN + records.len() * INDEX_ENTRY_LEN) as u64;
        let mut index = Vec::with_capacity(records.len());
        for (i, (pixels, class_id)) in records.iter().enumerate() {
            if pixels.len() != rec_len {
                return Err(DatasetError::Malformed(format!(
                    "record {i} has {} bytes, expected {rec_len}",
                    pixels.len()
                )));
            }
            let class_id = u16::try_from(*class_id)
                .map_err(|_| DatasetError::Overflow(format!("class id {class_id} exceeds u16")))?;
            let entry = IndexEntry {
                offset,
                length: rec_len as u32,
                class_id,
                checksum: crc32fast::hash(pixels),
            };
            bytes.extend_from_slice(&entry.offset.to_le_bytes());
            bytes.extend_from_slice(&entry.length.to_le_bytes());
            bytes.extend_from_slice(&entry.class_id.to_le_bytes());
            bytes.extend_from_slice(&entry.checksum.to_le_bytes());
            index.push(entry);
            offset += rec_len as u64;
        }
        for (pixels, _) in records {
            bytes.extend_from_slice(pixels);
        }
        Ok(Self {
            header,
            index,
            storage: Storage::Memory(bytes),
        })
    }

    /// Parses a complete pack held in memory.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, DatasetError> {
        let (header, index) = parse_head(&mut &bytes[..], Some(bytes.len() as u64))?;
        Ok(Self {
            header,
            index,
            storage: Storage::Memory(bytes),
        })
    }

    /// Opens a pack on disk; records are read lazily with positional reads.
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
        let len = file.metadata().map_err(|e| DatasetError::io(path, e))?.len();
        let mut reader = std::io::BufReader::new(&file);
        let (header, index) = parse_head(&mut reader, Some(len))?;
        Ok(Self {
            header,
            index,
            storage: Storage::File(file),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| DatasetError::io(path, e))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        match &self.storage {
            Storage::Memory(b) => Ok(b.clone()),
            Storage::File(f) => {
                let total = self.index.last().map_or(
                    (HEADER_LEN + self.index.len() * INDEX_ENTRY_LEN) as u64,
                    |e| e.offset + e.length as u64,
                );
                let mut buf = vec![0u8; total as usize];
                read_at(f, &mut buf, 0).map_err(|e| DatasetError::Malformed(e.to_string()))?;
                Ok(buf)
            }
        }
    }

    pub fn header(&self) -> &PackHeader {
        &self.header
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    /// Raw payload of record `idx`, verified against its checksum.
    pub fn read_raw(&self, idx: usize) -> Result<(Vec<u8>, usize), DatasetError> {
        let entry = self.index.get(idx).ok_or(DatasetError::OutOfRange {
            index: idx,
            count: self.index.len(),
        })?;
        let mut buf = vec![0u8; entry.length as usize];
        match &self.storage {
            Storage::Memory(b) => {
                let start = entry.offset as usize;
                let end = start + buf.len();
                buf.copy_from_slice(&b[start..end]);
            }
            Storage::File(f) => {
                read_at(f, &mut buf, entry.offset).map_err(|e| DatasetError::Malformed(format!("record {idx}: {e}")))?
            }
        }
        let computed = crc32fast::hash(&buf);
        if computed != entry.checksum {
            return Err(DatasetError::Checksum {
                index: idx,
                stored: entry.checksum,
                computed,
            });
        }
        Ok((buf, entry.class_id as usize))
    }

    pub fn read_record(&self, idx: usize) -> Result<(ImageTensor, usize), DatasetError> {
        let (bytes, class_id) = self.read_raw(idx)?;
        let h = &self.header;
        let img = ImageTensor::from_u8(h.height as usize, h.width as usize, h.channels as usize, &bytes)
            .map_err(|e| DatasetError::Malformed(format!("record {idx}: {e}")))?;
        Ok((img, class_id))
    }
}

impl RecordSource for PackFile {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn record(&self, idx: usize) -> Result<(ImageTensor, usize), DatasetError> {
        self.read_record(idx)
    }

    fn dims(&self) -> (usize, usize, usize) {
        (
            self.header.height as usize,
            self.header.width as usize,
            self.header.channels as usize,
        )
    }
}

impl RecordSource for [(ImageTensor, usize)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn record(&self, idx: usize) -> Result<(ImageTensor, usize), DatasetError> {
        self.get(idx).cloned().ok_or(DatasetError::OutOfRange {
            index: idx,
            count: <[_]>::len(self),
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.first()
            .map_or((0, 0, 0), |(i, _)| (i.height(), i.width(), i.channels()))
    }
}

impl RecordSource for Vec<(ImageTensor, usize)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn record(&self, idx: usize) -> Result<(ImageTensor, usize), DatasetError> {
        self.as_slice().record(idx)
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.as_slice().dims()
    }
}

#[cfg(unix)]
fn read_at(f: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    f.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(f: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match f.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

fn header_for(spec: PackSpec, count: usize) -> Result<PackHeader, DatasetError> {
    let overflow = |what: &str| DatasetError::Overflow(what.to_string());
    if spec.height == 0 || spec.width == 0 {
        return Err(DatasetError::Overflow("zero record dimension".into()));
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(DatasetError::Malformed(format!("unsupported channel count {}", spec.channels)));
    }
    let header = PackHeader {
        version: PACK_VERSION,
        record_count: u32::try_from(count).map_err(|_| overflow("record count exceeds u32"))?,
        height: u16::try_from(spec.height).map_err(|_| overflow("height exceeds u16"))?,
        width: u16::try_from(spec.width).map_err(|_| overflow("width exceeds u16"))?,
        channels: spec.channels as u8,
    };
    u32::try_from(header.record_len()).map_err(|_| overflow("record length exceeds u32"))?;
    Ok(header)
}

fn parse_head<R: std::io::Read>(r: &mut R, total_len: Option<u64>) -> Result<(PackHeader, Vec<IndexEntry>), DatasetError> {
    let truncated = |_| DatasetError::Malformed("truncated header or index".into());
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head).map_err(truncated)?;
    if head[0..4] != PACK_MAGIC {
        return Err(DatasetError::Malformed("bad magic".into()));
    }
    let le32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let le16 = |b: &[u8]| u16::from_le_bytes(b.try_into().unwrap());
    let header = PackHeader {
        version: le32(&head[4..8]),
        record_count: le32(&head[8..12]),
        height: le16(&head[12..14]),
        width: le16(&head[14..16]),
        channels: head[16],
    };
    if header.version != PACK_VERSION {
        return Err(DatasetError::Malformed(format!("unsupported version {}", header.version)));
    }
    let n = header.record_count as usize;
    let rec_len = header.record_len() as u64;
    let mut index = Vec::with_capacity(n.min(1 << 20));
    let mut prev_end = (HEADER_LEN + n * INDEX_ENTRY_LEN) as u64;
    for i in 0..n {
        let mut raw = [0u8; INDEX_ENTRY_LEN];
        r.read_exact(&mut raw).map_err(truncated)?;
        let entry = IndexEntry {
            offset: u64::from_le_bytes(raw[0..8].try_into().unwrap()),
            length: le32(&raw[8..12]),
            class_id: le16(&raw[12..14]),
            checksum: le32(&raw[14..18]),
        };
        if entry.length as u64 != rec_len {
            return Err(DatasetError::Malformed(format!(
                "record {i} length {} does not match header dims ({rec_len})",
                entry.length
            )));
        }
        if entry.offset < prev_end {
            return Err(DatasetError::Malformed(format!("record {i} offset is not increasing")));
        }
        prev_end = entry.offset + entry.length as u64;
        index.push(entry);
    }
    if let Some(len) = total_len {
        if prev_end > len {
            return Err(DatasetError::Malformed("records extend past end of file".into()));
        }
    }
    Ok((header, index))
}

/// A pack together with the manifest entries of its records, in record order.
#[derive(Debug)]
pub struct BuiltPack {
    pub pack: PackFile,
    pub entries: Vec<ManifestEntry>,
}

impl BuiltPack {
    pub fn entries_path(pack_path: &Path) -> std::path::PathBuf {
        let mut s = pack_path.as_os_str().to_owned();
        s.push(".entries.jsonl");
        s.into()
    }

    /// Writes the pack and its `<pack>.entries.jsonl` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.pack.save(path)?;
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).expect("entries serialize"));
            text.push('\n');
        }
        let side = Self::entries_path(path);
        std::fs::write(&side, text).map_err(|e| DatasetError::io(&side, e))
    }

    pub fn load_entries(pack_path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
        let side = Self::entries_path(pack_path);
        let text = std::fs::read_to_string(&side).map_err(|e| DatasetError::io(&side, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| DatasetError::Invalid(format!("{}: {e}", side.display()))))
            .collect()
    }
}

/// Packs every entry of `split`: entries are shuffled with a stream keyed by
/// `seed`, decoded, converted to `spec.channels`, resized and quantized.
/// Entry paths in the result are resolved against the manifest's directory.
pub fn build_pack(m: &Manifest, split: Split, spec: PackSpec, seed: u64, exec: Exec) -> Result<BuiltPack, DatasetError> {
    header_for(spec, m.len())?;
    let mut order: Vec<usize> = m.in_split(split).map(|(i, _)| i).collect();
    order.shuffle(&mut SeededRng::new(seed, streams::PACK));
    let mode = ColorMode::for_channels(spec.channels);
    let records = try_map_indexed(exec, order.len(), |k| {
        let entry = &m.entries()[order[k]];
        let path = m.resolve(&entry.path);
        let img = load_image_as(&path, mode).map_err(|source| DatasetError::Image {
            path: path.clone(),
            source,
        })?;
        let img = resize_bilinear(&img, spec.height, spec.width).map_err(|source| DatasetError::Image { path, source })?;
        Ok((img.to_u8(), entry.class_id))
    })?;
    let pack = PackFile::from_records(spec, &records)?;
    let entries = order
        .iter()
        .map(|&i| {
            let mut e = m.entries()[i].clone();
            e.path = m.resolve(&e.path).to_string_lossy().into_owned();
            e
        })
        .collect();
    Ok(BuiltPack { pack, entries })
}
