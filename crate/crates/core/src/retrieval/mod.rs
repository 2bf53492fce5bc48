//! Embedding database, exact nearest-neighbour search, and the identity
//! confirmation path that grows the database without retraining.

mod container;
mod store;

pub use container::{decode_database, encode_database, load_database, save_database, DatabaseHeader};
pub use store::{DatabaseStore, Snapshot};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::net::{Model, NetError};
use crate::synth::ImageSample;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("embedding has dimension {got}, database expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("model fingerprint {model:016x} does not match database fingerprint {database:016x}")]
    FingerprintMismatch { database: u64, model: u64 },
    #[error("unknown individual {0}")]
    UnknownIndividual(String),
    #[error("individual {0} already exists")]
    DuplicateIndividual(String),
    #[error("image id {0} already present in the database")]
    DuplicateImage(String),
    #[error("invalid id {0:?}: use letters, digits, '-', '_' or '.'")]
    InvalidId(String),
    #[error("k must be >= 1")]
    ZeroK,
    #[error("non-finite value in embedding for {0}")]
    NonFinite(String),
    #[error("database format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub individual_id: String,
    pub image_id: String,
    /// Seconds since the Unix epoch; 0 for records from a batch build.
    pub added_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub meta: RecordMeta,
    pub vector: Vec<f32>,
}

/// Records with their vectors stored contiguously, row-major, in insertion
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDatabase {
    embedding_dim: usize,
    fingerprint: u64,
    records: Vec<RecordMeta>,
    vectors: Vec<f32>,
    by_individual: BTreeMap<String, Vec<usize>>,
}

/// One neighbour from [`knn_query`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position of the record in the database.
    pub index: usize,
    pub individual_id: String,
    pub image_id: String,
    pub distance: f64,
}

/// An individual-level ranking entry: the individual's closest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rank: usize,
    pub individual_id: String,
    pub image_id: String,
    pub distance: f64,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Euclidean distance, accumulated in f64 in coordinate order.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl EmbeddingDatabase {
    pub fn new(embedding_dim: usize, fingerprint: u64) -> Self {
        Self {
            embedding_dim,
            fingerprint,
            records: Vec::new(),
            vectors: Vec::new(),
            by_individual: BTreeMap::new(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.embedding_dim..(i + 1) * self.embedding_dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// (individual_id, record count) in id order.
    pub fn individuals(&self) -> Vec<(String, usize)> {
        self.by_individual.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn has_individual(&self, id: &str) -> bool {
        self.by_individual.contains_key(id)
    }

    pub fn records_of(&self, id: &str) -> &[usize] {
        self.by_individual.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find_image(&self, image_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.image_id == image_id)
    }

    /// Appends a record; ids are validated and image ids must be unique.
    pub fn add_record(&mut self, record: EmbeddingRecord) -> Result<usize, RetrievalError> {
        let meta = record.meta;
        if record.vector.len() != self.embedding_dim {
            return Err(RetrievalError::Dimension {
                expected: self.embedding_dim,
                got: record.vector.len(),
            });
        }
        for id in [&meta.individual_id, &meta.image_id] {
            if !valid_id(id) {
                return Err(RetrievalError::InvalidId(id.clone()));
            }
        }
        if !record.vector.iter().all(|v| v.is_finite()) {
            return Err(RetrievalError::NonFinite(meta.image_id));
        }
        if self.find_image(&meta.image_id).is_some() {
            return Err(RetrievalError::DuplicateImage(meta.image_id));
        }
        let index = self.records.len();
        self.vectors.extend_from_slice(&record.vector);
        self.by_individual.entry(meta.individual_id.clone()).or_default().push(index);
        self.records.push(meta);
        Ok(index)
    }

    fn check_model(&self, model: &Model) -> Result<(), RetrievalError> {
        if model.fingerprint != self.fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                database: self.fingerprint,
                model: model.fingerprint,
            });
        }
        Ok(())
    }

    /// Adds a query image to an existing individual (`create == false`) or
    /// as the first record of a new one (`create == true`).
    pub fn confirm_identity(
        &mut self,
        model: &Model,
        image: &ImageSample,
        individual_id: &str,
        create: bool,
        added_at: u64,
    ) -> Result<usize, RetrievalError> {
        self.check_model(model)?;
        match (create, self.has_individual(individual_id)) {
            (false, false) => return Err(RetrievalError::UnknownIndividual(individual_id.into())),
            (true, true) => return Err(RetrievalError::DuplicateIndividual(individual_id.into())),
            _ => {}
        }
        let vector = model.embed_one(image)?;
        self.add_record(EmbeddingRecord {
            meta: RecordMeta {
                individual_id: individual_id.into(),
                image_id: image.image_id.clone(),
                added_at,
            },
            vector,
        })
    }
}

/// Exact k nearest records by Euclidean distance. Equal distances keep
/// insertion order; k is clamped to the record count.
pub trait KnnIndex {
    fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, RetrievalError>;
}

impl KnnIndex for EmbeddingDatabase {
    fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        knn_query(self, query, k)
    }
}

pub fn knn_query(db: &EmbeddingDatabase, query: &[f32], k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.len() != db.embedding_dim {
        return Err(RetrievalError::Dimension {
            expected: db.embedding_dim,
            got: query.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = (0..db.len()).map(|i| (euclidean(query, db.vector(i)), i)).collect();
    let k = k.min(scored.len());
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, by_key);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_key);
    Ok(scored
        .into_iter()
        .map(|(distance, index)| Neighbor {
            index,
            individual_id: db.records[index].individual_id.clone(),
            image_id: db.records[index].image_id.clone(),
            distance,
        })
        .collect())
}

/// The k nearest individuals, each represented by its closest record.
pub fn rank_individuals(db: &EmbeddingDatabase, query: &[f32], k: usize) -> Result<Vec<Candidate>, RetrievalError> {
    let all = knn_query(db, query, db.len().max(1))?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for n in all {
        if out.len() == k {
            break;
        }
        if seen.insert(n.individual_id.clone()) {
            out.push(Candidate {
                rank: out.len() + 1,
                individual_id: n.individual_id,
                image_id: n.image_id,
                distance: n.distance,
            });
        }
    }
    Ok(out)
}

/// Embeds every image with `model`; records keep the given order and carry
/// `added_at = 0` so rebuilds are byte-identical.
pub fn build_database(model: &Model, images: &[ImageSample]) -> Result<EmbeddingDatabase, RetrievalError> {
    let refs: Vec<&ImageSample> = images.iter().collect();
    let vectors = model.embed(&refs)?;
    let mut db = EmbeddingDatabase::new(model.embedding_dim(), model.fingerprint);
    for (img, vector) in images.iter().zip(vectors) {
        db.add_record(EmbeddingRecord {
            meta: RecordMeta {
                individual_id: img.individual_id.clone(),
                image_id: img.image_id.clone(),
                added_at: 0,
            },
            vector,
        })?;
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ModelConfig};

    pub(crate) fn db_from(rows: &[(&str, &str, Vec<f32>)]) -> EmbeddingDatabase {
        let mut db = EmbeddingDatabase::new(rows[0].2.len(), 7);
        for (ind, img, v) in rows {
            db.add_record(EmbeddingRecord {
                meta: RecordMeta {
                    individual_id: ind.to_string(),
                    image_id: img.to_string(),
                    added_at: 0,
                },
                vector: v.clone(),
            })
            .unwrap();
        }
        db
    }

    #[test]
    fn nearest_and_clamp() {
        let db = db_from(&[("a", "a1", vec![0.0, 0.0]), ("b", "b1", vec![3.0, 4.0]), ("a", "a2", vec![1.0, 0.0])]);
        let r = knn_query(&db, &[0.0, 0.0], 10).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 2, 1]);
        assert_eq!(r[2].distance, 5.0);
        assert_eq!(knn_query(&db, &[0.0, 0.0], 1).unwrap().len(), 1);
        assert!(matches!(knn_query(&db, &[0.0, 0.0], 0), Err(RetrievalError::ZeroK)));
        assert!(matches!(knn_query(&db, &[0.0], 1), Err(RetrievalError::Dimension { .. })));
    }

    #[test]
    fn ties_follow_insertion_order() {
        let db = db_from(&[
            ("a", "x1", vec![1.0]),
            ("b", "x2", vec![-1.0]),
            ("c", "x3", vec![1.0]),
            ("d", "x4", vec![-1.0]),
        ]);
        for k in 1..=4 {
            let r = knn_query(&db, &[0.0], k).unwrap();
            assert_eq!(r.iter().map(|n| n.index).collect::<Vec<_>>(), (0..k).collect::<Vec<_>>());
        }
    }

    #[test]
    fn individual_ranking_dedupes() {
        let db = db_from(&[("a", "a1", vec![0.0]), ("a", "a2", vec![0.1]), ("b", "b1", vec![0.2]), ("c", "c1", vec![5.0])]);
        let c = rank_individuals(&db, &[0.0], 10).unwrap();
        assert_eq!(c.iter().map(|c| c.individual_id.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
        assert_eq!(c[1].rank, 2);
        assert_eq!(rank_individuals(&db, &[0.0], 2).unwrap().len(), 2);
    }

    #[test]
    fn add_record_validation() {
        let mut db = db_from(&[("a", "a1", vec![0.0, 1.0])]);
        let rec = |ind: &str, img: &str, v: Vec<f32>| EmbeddingRecord {
            meta: RecordMeta {
                individual_id: ind.into(),
                image_id: img.into(),
                added_at: 0,
            },
            vector: v,
        };
        assert!(matches!(db.add_record(rec("a", "a1", vec![0.0, 0.0])), Err(RetrievalError::DuplicateImage(_))));
        assert!(matches!(db.add_record(rec("a", "a2", vec![0.0])), Err(RetrievalError::Dimension { .. })));
        assert!(matches!(db.add_record(rec("../x", "a3", vec![0.0, 0.0])), Err(RetrievalError::InvalidId(_))));
        assert!(matches!(db.add_record(rec("a", "a4", vec![f32::NAN, 0.0])), Err(RetrievalError::NonFinite(_))));
        db.add_record(rec("b", "b1", vec![2.0, 2.0])).unwrap();
        assert_eq!(db.individuals(), vec![("a".into(), 1), ("b".into(), 1)]);
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            blocks: vec![4, 8],
            embedding_dim: 8,
            ..Default::default()
        };
        Model::from_params(init_params(&cfg, seed).unwrap(), cfg).unwrap()
    }

    fn image(ind: &str, id: &str, shade: u8) -> ImageSample {
        ImageSample {
            individual_id: ind.into(),
            image_id: id.into(),
            height: 16,
            width: 16,
            pixels: (0..256).map(|i| if i % 5 == 0 { shade } else { 255 - shade }).collect(),
        }
    }

    #[test]
    fn confirm_and_create() {
        let model = tiny_model(1);
        let imgs = vec![image("a", "a1", 10), image("b", "b1", 200)];
        let mut db = build_database(&model, &imgs).unwrap();
        let q = image("?", "q1", 90);
        assert!(matches!(
            db.confirm_identity(&model, &q, "zz", false, 5),
            Err(RetrievalError::UnknownIndividual(_))
        ));
        assert!(matches!(
            db.confirm_identity(&model, &q, "a", true, 5),
            Err(RetrievalError::DuplicateIndividual(_))
        ));
        assert!(matches!(
            db.confirm_identity(&tiny_model(2), &q, "a", false, 5),
            Err(RetrievalError::FingerprintMismatch { .. })
        ));
        let i = db.confirm_identity(&model, &q, "a", false, 5).unwrap();
        assert_eq!(db.records()[i].added_at, 5);
        let top = rank_individuals(&db, &model.embed_one(&q).unwrap(), 1).unwrap();
        assert_eq!((top[0].individual_id.as_str(), top[0].distance), ("a", 0.0));
        let q2 = image("?", "q2", 150);
        db.confirm_identity(&model, &q2, "c", true, 6).unwrap();
        assert_eq!(db.individuals().len(), 3);
    }

    #[test]
    fn build_is_deterministic() {
        let model = tiny_model(3);
        let imgs = vec![image("a", "a1", 10), image("b", "b1", 200), image("b", "b2", 120)];
        let a = encode_database(&build_database(&model, &imgs).unwrap());
        let b = encode_database(&build_database(&model, &imgs).unwrap());
        assert_eq!(a, b);
    }
}
