use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;

use super::{save_database, EmbeddingDatabase, RetrievalError};

/// An immutable database version.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    pub db: EmbeddingDatabase,
}

/// Many lock-free readers, one writer at a time. A write builds the next
/// snapshot, persists it (when backed by a file) and only then publishes it.
pub struct DatabaseStore {
    current: ArcSwap<Snapshot>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
}

impl DatabaseStore {
    pub fn new(db: EmbeddingDatabase, path: Option<PathBuf>) -> Self {
        Self {
            current: ArcSwap::from_pointee(Snapshot { version: 1, db }),
            writer: Mutex::new(()),
            path,
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.load_full()
    }

    /// Applies `f` to a copy of the current database. On success the copy is
    /// persisted and installed as version + 1; on error nothing changes.
    pub fn update<R>(
        &self,
        f: impl FnOnce(&mut EmbeddingDatabase) -> Result<R, RetrievalError>,
    ) -> Result<(R, Arc<Snapshot>), RetrievalError> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let base = self.current.load_full();
        let mut db = base.db.clone();
        let out = f(&mut db)?;
        if let Some(path) = &self.path {
            save_database(&db, path)?;
        }
        let next = Arc::new(Snapshot {
            version: base.version + 1,
            db,
        });
        self.current.store(next.clone());
        Ok((out, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{load_database, EmbeddingRecord, RecordMeta};

    fn rec(i: usize) -> EmbeddingRecord {
        EmbeddingRecord {
            meta: RecordMeta {
                individual_id: "a".into(),
                image_id: format!("i{i}"),
                added_at: 0,
            },
            vector: vec![i as f32],
        }
    }

    #[test]
    fn failed_update_changes_nothing() {
        let store = DatabaseStore::new(EmbeddingDatabase::new(1, 0), None);
        store.update(|db| db.add_record(rec(0))).unwrap();
        let before = store.snapshot();
        assert!(store.update(|db| db.add_record(rec(0))).is_err());
        let after = store.snapshot();
        assert_eq!(before.version, after.version);
        assert_eq!(after.db.len(), 1);
    }

    #[test]
    fn writes_persist_before_publish() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.pidb");
        let store = DatabaseStore::new(EmbeddingDatabase::new(1, 0), Some(path.clone()));
        for i in 0..3 {
            let (_, snap) = store.update(|db| db.add_record(rec(i))).unwrap();
            assert_eq!(load_database(&path).unwrap(), snap.db);
        }
        assert_eq!(store.snapshot().version, 4);
    }

    #[test]
    fn concurrent_writers_serialize() {
        let store = Arc::new(DatabaseStore::new(EmbeddingDatabase::new(1, 0), None));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let s = store.clone();
                std::thread::spawn(move || {
                    for j in 0..10 {
                        s.update(|db| db.add_record(rec(t * 100 + j))).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let snap = store.snapshot();
        assert_eq!(snap.db.len(), 80);
        assert_eq!(snap.version, 81);
    }
}
