use std::sync::Arc;

use serde_json::{json, Value};
use uranker::annotation::SessionStore;
use uranker::dataset::{load_dataset, synth_generate, SynthOptions};
use uranker_cli::server::{router, AppState};
use uranker_cli::sim::{simulate, SimSpec};

struct Fixture {
    base: String,
    _dir: tempfile::TempDir,
}

async fn serve(with_data: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = if with_data {
        let root = dir.path().join("d");
        synth_generate(2, 5, 3, &root, &SynthOptions { size: 16, pairs: false }).unwrap();
        Some(load_dataset(&root).unwrap())
    } else {
        None
    };
    let store = SessionStore::open(&dir.path().join("events.jsonl")).unwrap();
    let app = router(Arc::new(AppState { store, data }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Fixture {
        base: format!("http://{addr}"),
        _dir: dir,
    }
}

fn spec(value: Value) -> SimSpec {
    serde_json::from_value(value).unwrap()
}

#[tokio::test]
async fn oracle_voters_recover_group_ranking() {
    let f = serve(true).await;
    let report = simulate(&f.base, &spec(json!({ "group": "g0001", "voters": ["a", "b", "c"], "seed": 9 })))
        .await
        .unwrap();
    assert!(report.matches_oracle, "{report:?}");
    assert_eq!(report.ranking.len(), 5);
    assert!(report.comparisons <= 5 * 4 / 2 + 4);
    assert_eq!(report.votes, 3 * report.comparisons);
}

#[tokio::test]
async fn minority_contrarian_is_outvoted_and_sessions_run_concurrently() {
    let f = serve(false).await;
    let order: Vec<String> = (0..6).map(|i| format!("x/{i}")).collect();
    let s1 = spec(json!({ "images": order, "order": order, "voters": ["a", "b", "c"], "contrarian": ["c"], "seed": 1 }));
    let s2 = spec(json!({ "images": order, "order": order, "voters": ["a", "b"], "tiebreak": "b", "seed": 2 }));
    let (r1, r2) = tokio::join!(simulate(&f.base, &s1), simulate(&f.base, &s2));
    let (r1, r2) = (r1.unwrap(), r2.unwrap());
    assert!(r1.matches_oracle && r2.matches_oracle);
    assert_ne!(r1.session_id, r2.session_id);
}

#[tokio::test]
async fn status_codes() {
    let f = serve(true).await;
    let c = reqwest::Client::new();
    let url = |p: &str| format!("{}{p}", f.base);

    let r = c.get(url("/sessions/nope/pair")).send().await.unwrap();
    assert_eq!(r.status(), 404);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"], "not_found");

    let r = c.post(url("/sessions")).json(&json!({ "images": ["g0000/nope.png", "g0000/x.png"], "voters": ["a"] })).send().await.unwrap();
    assert_eq!(r.status(), 400);
    let r = c.post(url("/sessions")).json(&json!({ "group": "g0000", "voters": ["a", "b"] })).send().await.unwrap();
    assert_eq!(r.status(), 400, "even roster without tiebreak");

    let r = c
        .post(url("/sessions"))
        .json(&json!({ "group": "g0000", "voters": ["a", "b", "c"], "seed": 4, "session_id": "s1" }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 201);
    assert_eq!(c.get(url("/sessions/s1/result")).send().await.unwrap().status(), 409);

    let pair: Value = c.get(url("/sessions/s1/pair?voter_id=a")).send().await.unwrap().json().await.unwrap();
    assert_eq!(pair["status"], "active");
    assert_eq!(pair["cursor"], 0);
    assert_eq!(pair["voters_remaining"], 3);
    assert_eq!(pair["my_vote_submitted"], false);
    let left = pair["left"].as_str().unwrap().to_string();
    let right = pair["right"].as_str().unwrap().to_string();
    assert_eq!(pair["left_url"], format!("/images/{left}"));

    let img = c.get(url(pair["left_url"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(img.status(), 200);
    assert_eq!(img.headers()["content-type"], "image/png");
    assert_eq!(&img.bytes().await.unwrap()[1..4], b"PNG");
    for bad in ["/images/g0000/..%2F..%2Fmanifest.json", "/images/..%2Fgroups/x.png", "/images/g0000/missing.png"] {
        assert_eq!(c.get(url(bad)).send().await.unwrap().status(), 404, "{bad}");
    }

    let vote = |v: &str, l: &str, r: &str| json!({ "voter_id": v, "choice": "left", "left": l, "right": r });
    let r = c.post(url("/sessions/s1/votes")).json(&vote("a", &left, &right)).send().await.unwrap();
    assert_eq!(r.status(), 200);
    let body: Value = r.json().await.unwrap();
    assert!(body["decision"].is_null());
    let r = c.post(url("/sessions/s1/votes")).json(&vote("a", &left, &right)).send().await.unwrap();
    assert_eq!(r.status(), 409);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "duplicate_vote");
    let r = c.post(url("/sessions/s1/votes")).json(&vote("b", &right, &left)).send().await.unwrap();
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "stale_pair");
    let r = c.post(url("/sessions/s1/votes")).json(&vote("zed", &left, &right)).send().await.unwrap();
    assert_eq!(r.status(), 403);

    let mine: Value = c.get(url("/sessions/s1/pair?voter_id=a")).send().await.unwrap().json().await.unwrap();
    assert_eq!(mine["my_vote_submitted"], true);
    assert_eq!(mine["voters_remaining"], 2);
    // Other voters' choices are not exposed before the pair resolves.
    let log: Value = c.get(url("/sessions/s1/log")).send().await.unwrap().json().await.unwrap();
    assert_eq!(log["decisions"].as_array().unwrap().len(), 0);

    for v in ["b", "c"] {
        c.post(url("/sessions/s1/votes")).json(&vote(v, &left, &right)).send().await.unwrap();
    }
    let log: Value = c.get(url("/sessions/s1/log")).send().await.unwrap().json().await.unwrap();
    let d = &log["decisions"][0];
    assert_eq!((d["left_votes"].as_u64(), d["swapped"].as_bool()), (Some(3), Some(false)));
    let next: Value = c.get(url("/sessions/s1/pair")).send().await.unwrap().json().await.unwrap();
    assert_eq!(next["cursor"], 1);
}
