//! Database container:
//!
//! ```text
//! "PIDB" | u32 LE version | u64 LE header length | JSON header | count×dim f32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingDatabase, EmbeddingRecord, RecordMeta, RetrievalError};

pub const MAGIC: &[u8; 4] = b"PIDB";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseHeader {
    pub embedding_dim: usize,
    pub count: usize,
    /// 16 hex digits.
    pub fingerprint: String,
    pub records: Vec<RecordMeta>,
}

fn format_err(offset: usize, reason: impl Into<String>) -> RetrievalError {
    RetrievalError::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn encode_database(db: &EmbeddingDatabase) -> Vec<u8> {
    let header = serde_json::to_vec(&DatabaseHeader {
        embedding_dim: db.embedding_dim(),
        count: db.len(),
        fingerprint: format!("{:016x}", db.fingerprint()),
        records: db.records().to_vec(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + header.len() + db.vectors().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in db.vectors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_database(bytes: &[u8]) -> Result<EmbeddingDatabase, RetrievalError> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated before magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic (expected PIDB)"));
    }
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), "truncated prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| PREFIX.checked_add(l))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(8, format!("header length {header_len} runs past end of file ({} bytes)", bytes.len())))?;
    let header: DatabaseHeader = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| format_err(PREFIX, format!("malformed header: {e}")))?;
    if header.records.len() != header.count {
        return Err(format_err(
            PREFIX,
            format!("count {} but {} records listed", header.count, header.records.len()),
        ));
    }
    if header.embedding_dim == 0 {
        return Err(format_err(PREFIX, "embedding_dim is 0"));
    }
    let fingerprint = u64::from_str_radix(&header.fingerprint, 16)
        .map_err(|_| format_err(PREFIX, format!("bad fingerprint {:?}", header.fingerprint)))?;
    let body = &bytes[header_end..];
    let need = header.count * header.embedding_dim * 4;
    if body.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated: vectors need {} bytes, {} present", need, body.len()),
        ));
    }
    if body.len() > need {
        return Err(format_err(header_end + need, format!("{} trailing bytes", body.len() - need)));
    }
    let mut db = EmbeddingDatabase::new(header.embedding_dim, fingerprint);
    let row_bytes = header.embedding_dim * 4;
    for (i, meta) in header.records.into_iter().enumerate() {
        let row = &body[i * row_bytes..(i + 1) * row_bytes];
        let vector = row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        db.add_record(EmbeddingRecord { meta, vector })
            .map_err(|e| format_err(header_end + i * row_bytes, format!("record {i}: {e}")))?;
    }
    Ok(db)
}

/// Writes to a sibling temp file and renames it into place, so a reader
/// never sees a half-written database.
pub fn save_database(db: &EmbeddingDatabase, path: &Path) -> Result<Vec<u8>, RetrievalError> {
    let bytes = encode_database(db);
    let io = |e| RetrievalError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(bytes)
}

pub fn load_database(path: &Path) -> Result<EmbeddingDatabase, RetrievalError> {
    let bytes = std::fs::read(path).map_err(|e| RetrievalError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_database(&bytes)
}
