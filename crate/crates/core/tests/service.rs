use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use patternid::net::{init_params, Model, ModelConfig};
use patternid::retrieval::{
    build_database, load_database, rank_individuals, EmbeddingDatabase, EmbeddingRecord, RecordMeta,
};
use patternid::service::{router, AppState, QueryResponse, ServiceConfig};
use patternid::synth::{image_path, pgm, ImageSample};
use serde_json::{json, Value};

fn model() -> Model {
    let cfg = ModelConfig {
        blocks: vec![4, 8],
        embedding_dim: 16,
        ..ModelConfig::default()
    };
    Model::from_params(init_params(&cfg, 11).unwrap(), cfg).unwrap()
}

fn image(ind: &str, img: &str, seed: u32) -> ImageSample {
    ImageSample {
        individual_id: ind.into(),
        image_id: img.into(),
        height: 20,
        width: 20,
        pixels: (0..400u32)
            .map(|i| (i.wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503)) >> 7) as u8)
            .collect(),
    }
}

/// 4 individuals × 3 images on disk plus their database.
fn gallery(root: &Path, model: &Model) -> (Vec<ImageSample>, EmbeddingDatabase) {
    let mut imgs = Vec::new();
    for i in 0..4 {
        for v in 0..3 {
            let ind = format!("ind-{i}");
            imgs.push(image(&ind, &format!("{ind}-v{v}"), (i * 10 + v) as u32));
        }
    }
    for im in &imgs {
        let p = image_path(root, &im.individual_id, &im.image_id);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        pgm::write(&p, im.width, im.height, &im.pixels).unwrap();
    }
    let db = build_database(model, &imgs).unwrap();
    (imgs, db)
}

struct Server {
    base: String,
    client: reqwest::Client,
    state: Arc<AppState>,
    _dir: tempfile::TempDir,
    db_path: std::path::PathBuf,
    pending_dir: std::path::PathBuf,
    images: Vec<ImageSample>,
}

async fn start_with(ttl: Duration, static_dir: Option<&Path>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let (images, db) = gallery(dir.path(), &m);
    let db_path = dir.path().join("g.pidb");
    patternid::retrieval::save_database(&db, &db_path).unwrap();
    let pending_dir = dir.path().join("pending");
    let cfg = ServiceConfig {
        images_dir: dir.path().to_path_buf(),
        pending_dir: pending_dir.clone(),
        pending_ttl: ttl,
        static_dir: static_dir.map(Path::to_path_buf),
    };
    let state = Arc::new(AppState::new(m, db, Some(db_path.clone()), cfg).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
        state,
        _dir: dir,
        db_path,
        pending_dir,
        images,
    }
}

async fn start() -> Server {
    start_with(Duration::from_secs(3600), None).await
}

impl Server {
    async fn query(&self, img: &ImageSample, k: Option<usize>) -> reqwest::Response {
        let part = reqwest::multipart::Part::bytes(img.to_pgm()).file_name("q.pgm");
        let mut form = reqwest::multipart::Form::new().part("image", part);
        if let Some(k) = k {
            form = form.text("k", k.to_string());
        }
        self.client
            .post(format!("{}/api/query", self.base))
            .multipart(form)
            .send()
            .await
            .unwrap()
    }

    async fn query_ok(&self, img: &ImageSample, k: Option<usize>) -> QueryResponse {
        let r = self.query(img, k).await;
        assert_eq!(r.status(), 200);
        r.json().await.unwrap()
    }

    async fn post_json(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get_json(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_listing_and_thumbnails() {
    let s = start().await;
    let (st, h) = s.get_json("/api/health").await;
    assert_eq!(st, 200);
    assert_eq!(h["db_version"], 1);
    assert_eq!(h["record_count"], 12);
    assert!(h["version"].is_string());
    let (_, inds) = s.get_json("/api/individuals").await;
    assert_eq!(inds.as_array().unwrap().len(), 4);
    assert_eq!(inds[0], json!({"individual_id": "ind-0", "image_count": 3}));

    let r = s.client.get(format!("{}/api/image/ind-2-v1", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    let png = r.bytes().await.unwrap();
    let back = patternid::imageio::decode_image(&png, "", "").unwrap();
    assert_eq!(back.pixels, s.images[7].pixels);
    let r = s.client.get(format!("{}/api/image/nope", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stored_image_ranks_itself_first_and_token_replays() {
    let s = start().await;
    let q = s.query_ok(&s.images[4], None).await;
    assert_eq!(q.k, 10);
    assert_eq!(q.db_version, 1);
    assert_eq!(q.candidates.len(), 4, "one candidate per individual");
    assert_eq!(q.candidates[0].individual_id, "ind-1");
    assert_eq!(q.candidates[0].image_id, "ind-1-v1");
    assert_eq!(q.candidates[0].distance, 0.0);
    assert_eq!(q.candidates[0].thumbnail, "/api/image/ind-1-v1");
    let (st, again) = s.get_json(&format!("/api/query/{}", q.query_token)).await;
    assert_eq!(st, 200);
    assert_eq!(serde_json::from_value::<QueryResponse>(again).unwrap(), q);

    let q2 = s.query_ok(&s.images[4], Some(2)).await;
    assert_eq!(q2.candidates.len(), 2);
    assert_ne!(q2.query_token, q.query_token);

    assert_eq!(s.query(&s.images[4], Some(0)).await.status(), 400);
    let bad = s
        .client
        .post(format!("{}/api/query", s.base))
        .multipart(reqwest::multipart::Form::new().text("k", "3"))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
    let (st, _) = s.get_json("/api/query/unknown").await;
    assert_eq!(st, 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn confirm_persists_and_requery_ranks_confirmed_individual_first() {
    let s = start().await;
    let novel = image("", "", 999);
    let q = s.query_ok(&novel, None).await;
    let (st, body) = s
        .post_json("/api/confirm", json!({"query_token": q.query_token, "individual_id": "ind-3"}))
        .await;
    assert_eq!(st, 200, "{body}");
    assert_eq!(body["db_version"], 2);
    assert_eq!(body["new_record"]["individual_id"], "ind-3");
    let image_id = body["new_record"]["image_id"].as_str().unwrap().to_string();

    // durable before the response: the file already holds the record
    let on_disk = load_database(&s.db_path).unwrap();
    assert_eq!(on_disk.len(), 13);
    assert_eq!(on_disk.find_image(&image_id), Some(12));
    assert!(std::fs::read_dir(&s.pending_dir).unwrap().next().is_none(), "pending files removed");

    let again = s.query_ok(&novel, None).await;
    assert_eq!(again.db_version, 2);
    assert_eq!(again.candidates[0].individual_id, "ind-3");
    assert_eq!(again.candidates[0].image_id, image_id);
    assert_eq!(again.candidates[0].distance, 0.0);
    let r = s.client.get(format!("{}/api/image/{image_id}", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 200);

    // a resolved token cannot be reused
    let (st, _) = s
        .post_json("/api/confirm", json!({"query_token": q.query_token, "individual_id": "ind-3"}))
        .await;
    assert_eq!(st, 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn create_individual_and_error_statuses() {
    let s = start().await;
    let q = s.query_ok(&image("", "", 555), None).await;
    let (st, _) = s
        .post_json("/api/confirm", json!({"query_token": q.query_token, "individual_id": "ind-77"}))
        .await;
    assert_eq!(st, 404, "confirming into an unknown individual");
    let (st, _) = s
        .post_json("/api/individuals", json!({"query_token": q.query_token, "new_individual_id": "ind-0"}))
        .await;
    assert_eq!(st, 409);
    let (st, _) = s
        .post_json("/api/individuals", json!({"query_token": q.query_token, "new_individual_id": "bad id/"}))
        .await;
    assert_eq!(st, 400);
    let (st, _) = s
        .post_json("/api/confirm", json!({"query_token": q.query_token, "individual": "ind-0"}))
        .await;
    assert!(st == 400 || st == 422, "{st}");

    let (st, body) = s
        .post_json("/api/individuals", json!({"query_token": q.query_token, "new_individual_id": "ind-new"}))
        .await;
    assert_eq!(st, 200, "{body}");
    assert_eq!(body, json!({"individual_id": "ind-new", "db_version": 2}));
    let (_, inds) = s.get_json("/api/individuals").await;
    assert_eq!(inds.as_array().unwrap().len(), 5);
    assert!(s.state.store.snapshot().db.has_individual("ind-new"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn expired_tokens_are_gone() {
    let s = start_with(Duration::ZERO, None).await;
    let q = s.query_ok(&s.images[0], None).await;
    let (st, body) = s.get_json(&format!("/api/query/{}", q.query_token)).await;
    assert_eq!(st, 410, "{body}");
    let (st, _) = s
        .post_json("/api/confirm", json!({"query_token": q.query_token, "individual_id": "ind-0"}))
        .await;
    assert_eq!(st, 410);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pending_queries_survive_a_restart() {
    let s = start().await;
    let q = s.query_ok(&image("", "", 4242), Some(3)).await;
    let restarted = AppState::new(
        model(),
        load_database(&s.db_path).unwrap(),
        None,
        ServiceConfig {
            images_dir: s._dir.path().to_path_buf(),
            pending_dir: s.pending_dir.clone(),
            pending_ttl: Duration::from_secs(3600),
            static_dir: None,
        },
    )
    .unwrap();
    assert_eq!(restarted.stored_query(&q.query_token).unwrap(), q);
    let (rec, v) = restarted.resolve(&q.query_token, "ind-2", false).unwrap();
    assert_eq!((rec.individual_id.as_str(), v), ("ind-2", 2));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn static_bundle_is_served_next_to_the_api() {
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<html>ui</html>").unwrap();
    let s = start_with(Duration::from_secs(60), Some(web.path())).await;
    let r = s.client.get(format!("{}/index.html", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.text().await.unwrap(), "<html>ui</html>");
    let r = s.client.get(format!("{}/", s.base)).send().await.unwrap();
    assert_eq!(r.status(), 200);
    let (st, _) = s.get_json("/api/health").await;
    assert_eq!(st, 200);
}

#[test]
fn mismatched_database_is_refused_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let db = EmbeddingDatabase::new(16, m.fingerprint ^ 1);
    let cfg = ServiceConfig {
        images_dir: dir.path().to_path_buf(),
        pending_dir: dir.path().join("p"),
        pending_ttl: Duration::from_secs(1),
        static_dir: None,
    };
    let err = AppState::new(m, db, None, cfg).err().unwrap();
    assert!(err.to_string().contains("fingerprint"), "{err}");
}

/// Readers race a stream of confirms; each response must equal brute-force
/// ranking on the exact snapshot version it reports.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_queries_see_whole_snapshots() {
    let s = Arc::new(start().await);
    let m = model();
    let initial = s.state.store.snapshot().db.clone();
    let probes: Vec<ImageSample> = (0..6).map(|i| image("", "", 7000 + i)).collect();
    let writes: Vec<ImageSample> = (0..8).map(|i| image("", "", 8000 + i)).collect();

    let mut readers = Vec::new();
    for r in 0..6 {
        let s = s.clone();
        let probes = probes.clone();
        readers.push(tokio::spawn(async move {
            let mut seen = Vec::new();
            for round in 0..12 {
                let p = (r + round) % probes.len();
                seen.push((p, s.query_ok(&probes[p], Some(5)).await));
            }
            seen
        }));
    }

    // the writer: each write is its own query + confirm, in order
    let mut confirmed: Vec<(String, ImageSample)> = Vec::new();
    for (i, w) in writes.iter().enumerate() {
        let q = s.query_ok(w, None).await;
        let ind = format!("ind-{}", i % 4);
        let (st, body) = s
            .post_json("/api/confirm", json!({"query_token": q.query_token, "individual_id": ind}))
            .await;
        assert_eq!(st, 200, "{body}");
        assert_eq!(body["db_version"], (i + 2) as u64);
        confirmed.push((body["new_record"]["image_id"].as_str().unwrap().to_string(), ImageSample {
            individual_id: ind,
            ..w.clone()
        }));
    }

    // rebuild every version from the initial db and the confirm order
    let mut versions = vec![initial.clone()];
    let mut db = initial;
    for (image_id, img) in &confirmed {
        db.add_record(EmbeddingRecord {
            meta: RecordMeta {
                individual_id: img.individual_id.clone(),
                image_id: image_id.clone(),
                added_at: 0,
            },
            vector: m.embed_one(img).unwrap(),
        })
        .unwrap();
        versions.push(db.clone());
    }

    let mut checked = 0;
    let mut distinct = std::collections::BTreeSet::new();
    for h in readers {
        for (p, resp) in h.await.unwrap() {
            let v = resp.db_version as usize;
            assert!((1..=versions.len()).contains(&v));
            distinct.insert(v);
            let want = rank_individuals(&versions[v - 1], &m.embed_one(&probes[p]).unwrap(), 5).unwrap();
            let got: Vec<(usize, String, String, f64)> = resp
                .candidates
                .iter()
                .map(|c| (c.rank, c.individual_id.clone(), c.image_id.clone(), c.distance))
                .collect();
            let want: Vec<(usize, String, String, f64)> = want
                .into_iter()
                .map(|c| (c.rank, c.individual_id, c.image_id, c.distance))
                .collect();
            assert_eq!(got, want, "probe {p} at version {v}");
            checked += 1;
        }
    }
    assert_eq!(checked, 72);
    assert_eq!(load_database(&s.db_path).unwrap().len(), 12 + writes.len());
    eprintln!("versions observed by readers: {distinct:?}");
}
