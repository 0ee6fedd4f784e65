mod common;

use base64::Engine as _;
use common::*;
use serde_json::json;
use word4per::manifest::{load_triplets, read_jsonl};
use word4per_core::curation::{Candidate, Decision, Verdict};
use word4per_core::losses::Supervision;
use word4per_core::retrieval::{QueryMode, QuerySpec};

fn composed(image: &str, caption: &str, tinets: &[&str], k: usize) -> serde_json::Value {
    json!({ "image_id": image, "caption": caption, "mode": "composed", "tinet_ids": tinets, "k": k })
}

#[tokio::test]
async fn composed_retrieval_mirrors_the_engine() {
    let fx = fixture();
    let state = fx.state();
    let model = word4per::service::Model::load(&fx.config).unwrap();
    let engine = model.engine();
    for (tinets, k) in [(vec!["text"], 5), (vec!["text", "vis"], 3), (vec!["vis"], 12)] {
        let r = post(&state, "/api/v1/retrieve", composed("p000_00", "a person wearing a red coat", &tinets, k)).await;
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        let results = r.json()["results"].as_array().unwrap().clone();
        let spec = QuerySpec {
            mode: QueryMode::Composed,
            image_id: Some("p000_00".into()),
            caption: Some("a person wearing a red coat".into()),
            tinet_ids: tinets.iter().map(|s| s.to_string()).collect(),
        };
        let direct = engine.retrieve(&spec, k, false).unwrap();
        assert_eq!(results.len(), k.min(model.gallery.len()));
        for (i, hit) in results.iter().enumerate() {
            assert_eq!(hit["image_id"], direct.ranked_ids[i].as_str());
            assert_eq!(hit["score"].as_f64().unwrap(), direct.scores[i]);
            assert_eq!(hit["thumbnail_url"], format!("/api/v1/images/{}", direct.ranked_ids[i]));
        }
        let scores: Vec<f64> = results.iter().map(|h| h["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[tokio::test]
async fn baseline_modes_and_exclusion() {
    let fx = fixture();
    let state = fx.state();
    for mode in ["image-only", "text-only", "avg"] {
        let body = json!({ "image_id": "p001_01", "caption": "a person in black", "mode": mode, "k": 4 });
        let r = post(&state, "/api/v1/retrieve", body).await;
        assert_eq!(r.status, 200, "{mode}");
        assert_eq!(r.json()["results"].as_array().unwrap().len(), 4);
    }
    let body = json!({ "image_id": "p001_01", "mode": "image-only", "k": 1 });
    assert_eq!(post(&state, "/api/v1/retrieve", body).await.json()["results"][0]["image_id"], "p001_01");
    let body = json!({ "image_id": "p001_01", "mode": "image-only", "k": 30, "exclude_reference": true });
    let r = post(&state, "/api/v1/retrieve", body).await.json();
    assert!(r["results"].as_array().unwrap().iter().all(|h| h["image_id"] != "p001_01"));
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let fx = fixture();
    let state = fx.state();
    let body = composed("p002_00", "a person wearing a green jacket", &["text", "vis"], 6);
    let a = post(&state, "/api/v1/retrieve", body.clone()).await;
    let b = post(&state, "/api/v1/retrieve", body.clone()).await;
    let c = post(&fx.state(), "/api/v1/retrieve", body).await;
    assert_eq!(a.status, 200);
    assert_eq!(a.body, b.body);
    assert_eq!(a.body, c.body);
}

#[tokio::test]
async fn uploaded_image_matches_the_stored_one() {
    let fx = fixture();
    let state = fx.state();
    let png = std::fs::read(fx.path("data/images/p000_00.png")).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let by_id = post(&state, "/api/v1/retrieve", composed("p000_00", "a person", &["text"], 5)).await;
    let upload = json!({ "image_b64": b64, "caption": "a person", "mode": "composed", "tinet_ids": ["text"], "k": 5 });
    let by_bytes = post(&state, "/api/v1/retrieve", upload).await;
    assert_eq!(by_bytes.status, 200);
    assert_eq!(by_id.body, by_bytes.body);

    let bad = json!({ "image_b64": "not base64!", "mode": "image-only" });
    assert_eq!(post(&state, "/api/v1/retrieve", bad).await.status, 400);
    let garbage = base64::engine::general_purpose::STANDARD.encode(b"not an image");
    let bad = json!({ "image_b64": garbage, "mode": "image-only" });
    assert_eq!(post(&state, "/api/v1/retrieve", bad).await.status, 400);
}

#[tokio::test]
async fn retrieval_errors_map_to_statuses() {
    let fx = fixture();
    let state = fx.state();
    let cases = [
        (composed("nobody", "x", &["text"], 3), 404),
        (composed("p000_00", "x", &["missing-net"], 3), 400),
        (composed("p000_00", "x", &["foreign"], 3), 409),
        (composed("p000_00", "x", &["text", "foreign"], 3), 409),
        (composed("p000_00", "x", &[], 3), 400),
        (composed("p000_00", "x", &["text"], 0), 400),
        (json!({ "image_id": "p000_00", "mode": "sideways" }), 400),
        (json!({ "image_id": "p000_00", "mode": "avg", "colour": "red" }), 400),
        (json!({ "mode": "image-only" }), 400),
        (json!({ "image_id": "p000_00", "image_b64": "AAAA", "mode": "image-only" }), 400),
        (json!({ "image_id": "p000_00", "mode": "text-only" }), 400),
    ];
    for (body, status) in cases {
        let r = post(&state, "/api/v1/retrieve", body.clone()).await;
        assert_eq!(r.status, status, "{body} -> {}", String::from_utf8_lossy(&r.body));
        assert!(r.json()["error"]["message"].is_string());
    }
    let r = call(&state, "POST", "/api/v1/retrieve", Some("{not json".into())).await;
    assert_eq!(r.status, 400);
}

#[tokio::test]
async fn thumbnails_are_served() {
    let fx = fixture();
    let state = fx.state();
    let r = get(&state, "/api/v1/images/p003_02").await;
    assert_eq!(r.status, 200);
    assert_eq!(r.body, std::fs::read(fx.path("data/images/p003_02.png")).unwrap());
    let r = get(&state, "/api/v1/images/p000_00").await;
    assert_eq!(r.status, 200);
    assert_eq!(get(&state, "/api/v1/images/nope").await.status, 404);
}

#[tokio::test]
async fn tinet_listing_and_health() {
    let fx = fixture();
    let state = fx.state();
    assert_eq!(get(&state, "/api/v1/health").await.json()["status"], "ok");
    let v = get(&state, "/api/v1/tinets").await.json();
    let names: Vec<&str> = v["tinets"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["foreign", "text", "vis"]);
    assert_eq!(v["gallery_size"], 12);
}

fn verdict(pair: &str, decision: &str) -> serde_json::Value {
    json!({ "pair_id": pair, "decision": decision, "annotator": "tester", "ts": "2026-01-02T03:04:05Z" })
}

#[tokio::test]
async fn three_pair_queue_drains_then_204() {
    let fx = fixture();
    let state = fx.state();
    let candidates: Vec<Candidate> = read_jsonl(&fx.path("three.jsonl")).unwrap().into_iter().map(|(_, c)| c).collect();
    let mut by_similarity = candidates.clone();
    by_similarity.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    for (i, expected) in by_similarity.iter().enumerate() {
        let next = get(&state, "/api/v1/curation/next").await;
        assert_eq!(next.status, 200);
        let n = next.json();
        assert_eq!(n["pair_id"], expected.pair_id.as_str());
        assert_eq!(n["target_id"], expected.target_id.as_str());
        assert_eq!(n["candidate_id"], expected.candidate_id.as_str());
        assert_eq!(n["similarity"].as_f64().unwrap(), expected.similarity);
        assert_eq!(n["image_urls"]["target"], format!("/api/v1/images/{}", expected.target_id));
        assert_eq!(n["remaining"], 3 - i);
        let decision = if i == 1 { "reject" } else { "accept" };
        let r = post(&state, "/api/v1/curation/verdict", verdict(&expected.pair_id, decision)).await;
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        assert_eq!(r.json()["remaining"], 2 - i);
    }
    let done = get(&state, "/api/v1/curation/next").await;
    assert_eq!(done.status, 204);
    assert!(done.body.is_empty());

    let log: Vec<Verdict> = read_jsonl(&fx.path("verdicts.jsonl")).unwrap().into_iter().map(|(_, v)| v).collect();
    assert_eq!(log.len(), 3);
    assert_eq!(log[1].decision, Decision::Reject);
    assert!(log.iter().all(|v| v.annotator == "tester" && v.ts == "2026-01-02T03:04:05Z"));
}

#[tokio::test]
async fn replayed_and_unknown_verdicts_are_rejected() {
    let fx = fixture();
    let state = fx.state();
    let pair = get(&state, "/api/v1/curation/next").await.json()["pair_id"].as_str().unwrap().to_string();
    assert_eq!(post(&state, "/api/v1/curation/verdict", verdict(&pair, "accept")).await.status, 200);
    let replay = post(&state, "/api/v1/curation/verdict", verdict(&pair, "accept")).await;
    assert_eq!(replay.status, 409);
    assert_eq!(post(&state, "/api/v1/curation/verdict", verdict(&pair, "reject")).await.status, 409);
    assert_eq!(post(&state, "/api/v1/curation/verdict", verdict("0000000000000000", "accept")).await.status, 404);
    assert_eq!(post(&state, "/api/v1/curation/verdict", verdict(&pair, "maybe")).await.status, 400);
    let anonymous = json!({ "pair_id": pair, "decision": "accept", "annotator": " " });
    assert_eq!(post(&state, "/api/v1/curation/verdict", anonymous).await.status, 400);
    let log = std::fs::read_to_string(fx.path("verdicts.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn verdicts_survive_restart_and_reach_the_triplet_file() {
    let fx = fixture();
    let before = load_triplets(&fx.path("data/triplets.jsonl")).unwrap();
    let first = {
        let state = fx.state();
        let n = get(&state, "/api/v1/curation/next").await.json();
        let body = json!({ "pair_id": n["pair_id"], "decision": "accept", "annotator": "a" });
        let r = post(&state, "/api/v1/curation/verdict", body).await;
        assert_eq!(r.status, 200);
        assert!(r.json()["verdict"]["ts"].as_str().unwrap().contains('T'));
        let curated = load_triplets(&fx.path("curated.jsonl")).unwrap();
        let target = n["target_id"].as_str().unwrap();
        let candidate = n["candidate_id"].as_str().unwrap();
        for (b, a) in before.iter().zip(&curated) {
            assert!(a.target_image_ids.starts_with(&b.target_image_ids));
            let expect_new = b.target_image_ids.iter().any(|t| t == target) && b.query_image_id != candidate;
            assert_eq!(a.target_image_ids.iter().any(|t| t == candidate), expect_new || b.target_image_ids.iter().any(|t| t == candidate));
        }
        assert!(curated.iter().any(|t| t.target_image_ids.iter().any(|x| x == candidate)));
        n["pair_id"].as_str().unwrap().to_string()
    };

    let restarted = fx.state();
    let n = get(&restarted, "/api/v1/curation/next").await.json();
    assert_ne!(n["pair_id"], first.as_str());
    assert_eq!(n["remaining"], 2);
    assert_eq!(post(&restarted, "/api/v1/curation/verdict", verdict(&first, "accept")).await.status, 409);
    for _ in 0..2 {
        let n = get(&restarted, "/api/v1/curation/next").await.json();
        let pair = n["pair_id"].as_str().unwrap();
        assert_eq!(post(&restarted, "/api/v1/curation/verdict", verdict(pair, "reject")).await.status, 200);
    }
    assert_eq!(get(&fx.state(), "/api/v1/curation/next").await.status, 204);
}

#[tokio::test]
async fn curation_routes_without_a_session() {
    let mut fx = fixture();
    fx.config.serve.candidates = None;
    let state = fx.state();
    assert_eq!(get(&state, "/api/v1/curation/next").await.status, 404);
    assert_eq!(post(&state, "/api/v1/curation/verdict", verdict("x", "accept")).await.status, 404);
}

#[tokio::test]
async fn reload_swaps_in_new_checkpoints() {
    let fx = fixture();
    let state = fx.state();
    let body = composed("p000_00", "a person", &["text"], 12);
    let before = post(&state, "/api/v1/retrieve", body.clone()).await;
    assert_eq!(before.status, 200);
    save_tinet(&fx.path("text.w4pt"), "text", Supervision::Text, &fx.encoder, 99);
    assert_eq!(post(&state, "/api/v1/retrieve", body.clone()).await.body, before.body);
    assert_eq!(post(&state, "/api/v1/reload", json!({})).await.status, 200);
    let after = post(&state, "/api/v1/retrieve", body.clone()).await;
    assert_eq!(after.status, 200);
    assert_ne!(after.body, before.body);

    std::fs::copy(fx.path("vis.w4pt"), fx.path("text.w4pt")).unwrap();
    let failed = post(&state, "/api/v1/reload", json!({})).await;
    assert_eq!(failed.status, 500);
    assert!(failed.json()["error"]["message"].as_str().unwrap().contains("vis"));
    assert_eq!(post(&state, "/api/v1/retrieve", body).await.body, after.body);
}

#[tokio::test]
async fn concurrent_verdicts_are_serialised() {
    let fx = fixture();
    let state = fx.state();
    let pair = get(&state, "/api/v1/curation/next").await.json()["pair_id"].as_str().unwrap().to_string();
    let mut handles = Vec::new();
    for _ in 0..8 {
        let s = state.clone();
        let p = pair.clone();
        handles.push(tokio::spawn(async move { post(&s, "/api/v1/curation/verdict", verdict(&p, "accept")).await.status }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap().as_u16() {
            200 => ok += 1,
            409 => {}
            other => panic!("status {other}"),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(std::fs::read_to_string(fx.path("verdicts.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn bind_address_prefers_the_environment() {
    let fx = fixture();
    let mut cfg = fx.config.clone();
    // SAFETY: this is the only test in the binary that touches the variable.
    unsafe { std::env::remove_var(word4per::service::BIND_ENV) };
    assert_eq!(word4per::service::bind_address(&cfg).unwrap().to_string(), word4per::service::DEFAULT_BIND);
    cfg.serve.bind = Some("0.0.0.0:9000".into());
    assert_eq!(word4per::service::bind_address(&cfg).unwrap().port(), 9000);
    unsafe { std::env::set_var(word4per::service::BIND_ENV, "127.0.0.1:9100") };
    assert_eq!(word4per::service::bind_address(&cfg).unwrap().port(), 9100);
    unsafe { std::env::set_var(word4per::service::BIND_ENV, "nonsense") };
    assert!(word4per::service::bind_address(&cfg).is_err());
    unsafe { std::env::remove_var(word4per::service::BIND_ENV) };
}
