//! C ABI over the embedding model and the embedding database.
//!
//! Every function returns a [`PidStatus`]; on failure a message is kept
//! per thread and can be read with [`pid_last_error`]. Handles are opaque
//! and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use patternid::net::{Model, NetError};
use patternid::retrieval::{
    load_database, rank_individuals, save_database, EmbeddingDatabase, EmbeddingRecord, RecordMeta, RetrievalError,
};
use patternid::synth::ImageSample;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    FingerprintMismatch = 5,
    DimensionMismatch = 6,
    Duplicate = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct PidModel {
    model: Model,
}

/// Opaque database handle.
pub struct PidDatabase {
    db: EmbeddingDatabase,
}

/// One ranked candidate individual. `record` indexes the database record
/// that represents it (its nearest image).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidMatch {
    pub rank: usize,
    pub record: usize,
    pub distance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Failure(PidStatus, String);

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let code = match e {
            NetError::Io { .. } => PidStatus::Io,
            NetError::Checkpoint { .. } => PidStatus::Format,
            NetError::Config(_) | NetError::SpatialUnderflow { .. } | NetError::Shape(_) => PidStatus::InvalidArgument,
            NetError::NonFinite(_) => PidStatus::Internal,
        };
        Failure(code, e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        let code = match e {
            RetrievalError::Io { .. } => PidStatus::Io,
            RetrievalError::Format { .. } => PidStatus::Format,
            RetrievalError::FingerprintMismatch { .. } => PidStatus::FingerprintMismatch,
            RetrievalError::Dimension { .. } => PidStatus::DimensionMismatch,
            RetrievalError::DuplicateImage(_) | RetrievalError::DuplicateIndividual(_) => PidStatus::Duplicate,
            RetrievalError::Net(n) => return n.into(),
            _ => PidStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

fn fail(code: PidStatus, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PidStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PidStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(PidStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PidStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(PidStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(PidStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(PidStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `s` plus a terminating NUL into `buf`. `needed` receives the
/// required capacity either way.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = s.len() + 1;
    if let Some(nd) = needed.as_mut() {
        *nd = n;
    }
    if buf.is_null() || cap < n {
        return Err(fail(PidStatus::BufferTooSmall, format!("need {n} bytes, have {cap}")));
    }
    ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pid_model_load(path: *const c_char, out: *mut *mut PidModel) -> PidStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = Model::load(&path)?;
        *out = Box::into_raw(Box::new(PidModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pid_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn pid_model_free(model: *mut PidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pid_model_embedding_dim(model: *const PidModel, out: *mut usize) -> PidStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.model.embedding_dim();
        Ok(())
    })
}

/// FNV-1a 64 of the checkpoint bytes; databases record it.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pid_model_fingerprint(model: *const PidModel, out: *mut u64) -> PidStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.model.fingerprint;
        Ok(())
    })
}

/// Embeds one row-major 8-bit grayscale image into `out`, which must hold
/// `out_len >= embedding_dim` floats.
///
/// # Safety
/// `pixels` must point to `width * height` bytes; `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pid_model_embed(
    model: *const PidModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut f32,
    out_len: usize,
) -> PidStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.model;
        if width == 0 || height == 0 {
            return Err(fail(PidStatus::InvalidArgument, "image has zero extent"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| fail(PidStatus::InvalidArgument, "image size overflows"))?;
        let px = slice_arg(pixels, n, "pixels")?;
        let dim = model.embedding_dim();
        if out.is_null() {
            return Err(fail(PidStatus::NullPointer, "out is null"));
        }
        if out_len < dim {
            return Err(fail(PidStatus::BufferTooSmall, format!("need {dim} floats, have {out_len}")));
        }
        let img = ImageSample {
            individual_id: "query".into(),
            image_id: "query".into(),
            height,
            width,
            pixels: px.to_vec(),
        };
        let v = model.embed_one(&img)?;
        ptr::copy_nonoverlapping(v.as_ptr(), out, dim);
        Ok(())
    })
}

/// Empty database for embeddings of the given dimension produced by the
/// model with the given fingerprint.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pid_db_new(embedding_dim: usize, fingerprint: u64, out: *mut *mut PidDatabase) -> PidStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if embedding_dim == 0 {
            return Err(fail(PidStatus::InvalidArgument, "embedding_dim must be > 0"));
        }
        *out = Box::into_raw(Box::new(PidDatabase {
            db: EmbeddingDatabase::new(embedding_dim, fingerprint),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pid_db_load(path: *const c_char, out: *mut *mut PidDatabase) -> PidStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let db = load_database(&path)?;
        *out = Box::into_raw(Box::new(PidDatabase { db }));
        Ok(())
    })
}

/// Writes the database atomically (temporary file, then rename).
///
/// # Safety
/// `db` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pid_db_save(db: *const PidDatabase, path: *const c_char) -> PidStatus {
    guard(|| {
        let db = &ref_arg(db, "db")?.db;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_database(db, &path)?;
        Ok(())
    })
}

/// # Safety
/// `db` must come from [`pid_db_new`] / [`pid_db_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn pid_db_free(db: *mut PidDatabase) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// # Safety
/// `db` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pid_db_len(db: *const PidDatabase, out: *mut usize) -> PidStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(db, "db")?.db.len();
        Ok(())
    })
}

/// # Safety
/// `db` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pid_db_fingerprint(db: *const PidDatabase, out: *mut u64) -> PidStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(db, "db")?.db.fingerprint();
        Ok(())
    })
}

/// Appends one record; `out_index` (nullable) receives its index.
///
/// # Safety
/// String arguments must be NUL-terminated; `vector` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pid_db_add(
    db: *mut PidDatabase,
    individual_id: *const c_char,
    image_id: *const c_char,
    vector: *const f32,
    len: usize,
    out_index: *mut usize,
) -> PidStatus {
    guard(|| {
        let db = &mut out_arg(db, "db")?.db;
        let record = EmbeddingRecord {
            meta: RecordMeta {
                individual_id: str_arg(individual_id, "individual_id")?.to_string(),
                image_id: str_arg(image_id, "image_id")?.to_string(),
                added_at: 0,
            },
            vector: slice_arg(vector, len, "vector")?.to_vec(),
        };
        let i = db.add_record(record)?;
        if let Some(o) = out_index.as_mut() {
            *o = i;
        }
        Ok(())
    })
}

/// Copies a record's individual id into `buf` (NUL-terminated). `needed`
/// (nullable) receives the required capacity, also on `BufferTooSmall`.
///
/// # Safety
/// `buf` must be writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pid_db_record_individual(
    db: *const PidDatabase,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> PidStatus {
    guard(|| {
        let db = &ref_arg(db, "db")?.db;
        let r = db
            .records()
            .get(index)
            .ok_or_else(|| fail(PidStatus::OutOfRange, format!("record {index} of {}", db.len())))?;
        copy_out(&r.individual_id, buf, cap, needed)
    })
}

/// Same as [`pid_db_record_individual`] for the image id.
///
/// # Safety
/// `buf` must be writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pid_db_record_image(
    db: *const PidDatabase,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> PidStatus {
    guard(|| {
        let db = &ref_arg(db, "db")?.db;
        let r = db
            .records()
            .get(index)
            .ok_or_else(|| fail(PidStatus::OutOfRange, format!("record {index} of {}", db.len())))?;
        copy_out(&r.image_id, buf, cap, needed)
    })
}

/// Ranks the k nearest individuals to `query`. Writes at most `capacity`
/// matches to `out` and their number to `out_count`.
///
/// # Safety
/// `query` must hold `len` floats; `out` must be writable for `capacity`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn pid_db_match(
    db: *const PidDatabase,
    query: *const f32,
    len: usize,
    k: usize,
    out: *mut PidMatch,
    capacity: usize,
    out_count: *mut usize,
) -> PidStatus {
    guard(|| {
        let db = &ref_arg(db, "db")?.db;
        let q = slice_arg(query, len, "query")?;
        let count = out_arg(out_count, "out_count")?;
        *count = 0;
        let ranked = rank_individuals(db, q, k)?;
        if capacity < ranked.len() {
            return Err(fail(
                PidStatus::BufferTooSmall,
                format!("need {} matches, have {capacity}", ranked.len()),
            ));
        }
        if !ranked.is_empty() && out.is_null() {
            return Err(fail(PidStatus::NullPointer, "out is null"));
        }
        for (i, c) in ranked.iter().enumerate() {
            let record = db.find_image(&c.image_id).expect("ranked image is in the database");
            *out.add(i) = PidMatch {
                rank: c.rank,
                record,
                distance: c.distance,
            };
        }
        *count = ranked.len();
        Ok(())
    })
}

/// Embeds an image with `model` and ranks it against `db`, checking that
/// the two belong together.
///
/// # Safety
/// As [`pid_model_embed`] and [`pid_db_match`].
#[no_mangle]
pub unsafe extern "C" fn pid_match_image(
    model: *const PidModel,
    db: *const PidDatabase,
    pixels: *const u8,
    width: usize,
    height: usize,
    k: usize,
    out: *mut PidMatch,
    capacity: usize,
    out_count: *mut usize,
) -> PidStatus {
    let m = match ref_arg(model, "model") {
        Ok(m) => &m.model,
        Err(Failure(code, msg)) => {
            set_error(msg);
            return code;
        }
    };
    if let Some(d) = db.as_ref() {
        if d.db.fingerprint() != m.fingerprint {
            set_error(
                RetrievalError::FingerprintMismatch {
                    database: d.db.fingerprint(),
                    model: m.fingerprint,
                }
                .to_string(),
            );
            return PidStatus::FingerprintMismatch;
        }
    }
    let mut v = vec![0f32; m.embedding_dim()];
    let st = pid_model_embed(model, pixels, width, height, v.as_mut_ptr(), v.len());
    if st != PidStatus::Ok {
        return st;
    }
    pid_db_match(db, v.as_ptr(), v.len(), k, out, capacity, out_count)
}
