use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use biomarker_core::cluster::ConditionalMatrix;
use biomarker_core::review::{Member, ReviewCatalog, ReviewStore};
use biomarker_core::synth::GradingLabel;
use biomarker_core::GrayImage;
use http_body_util::BodyExt;
use review_server::{router, AppState, Assets, Dashboard, RevealView, ServerConfig, SessionView};
use serde_json::{json, Value};
use tower::ServiceExt;

fn catalog() -> ReviewCatalog {
    let clusters = (0..3)
        .map(|c| {
            (0..24)
                .map(|i| Member {
                    image_id: format!("c{c}i{i}"),
                    patient_id: format!("c{c}p{i}"),
                })
                .collect()
        })
        .collect();
    let row = |i: usize| {
        let mut r = vec![0.0; 5];
        r[i] = 1.0;
        Some(r)
    };
    ReviewCatalog {
        clusters,
        conditional: Some(ConditionalMatrix {
            labels: GradingLabel::ALL.to_vec(),
            counts: vec![vec![0; 5]; 3],
            rows: vec![row(1), row(3), row(1)],
        }),
    }
}

fn app(root: &Path) -> Router {
    let assets = Assets {
        images_dir: root.join("images"),
        maps_dir: root.join("maps"),
    };
    let store = ReviewStore::open(&root.join("review"), catalog()).unwrap();
    let config = ServerConfig {
        curator_token: Some("secret".into()),
    };
    router(AppState::new(store, assets, config))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    call_with(app, method, uri, body, None).await
}

async fn call_with(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn review_cluster(app: &Router, session: &str, cluster: usize, terms: Value, decision: Value) {
    let base = format!("/api/sessions/{session}/clusters/{cluster}");
    let (s, body) = call(app, "POST", &format!("{base}/reveal-initial"), None).await;
    assert_eq!(s, StatusCode::OK);
    let reveal: RevealView = serde_json::from_slice(&body).unwrap();
    assert_eq!(reveal.images.len(), 10);
    let (s, _) = json_call(app, "POST", &format!("{base}/descriptions"), Some(terms)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = json_call(app, "POST", &format!("{base}/reveal-validation"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = json_call(app, "POST", &format!("{base}/finalize"), Some(decision)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

fn terms(list: &[&str]) -> Value {
    json!({ "terms": list.iter().enumerate().map(|(i, t)| json!({"rank": i + 1, "term": t})).collect::<Vec<_>>() })
}

#[tokio::test]
async fn two_team_round_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app1 = app(dir.path());

    let (s, v) = json_call(&app1, "POST", "/api/sessions", Some(json!({"team_id": "a", "round": "r1", "seed": 1}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let a: SessionView = serde_json::from_value(v).unwrap();
    assert!(a.clusters.iter().all(|c| c.stage == biomarker_core::review::Stage::InitialReveal));
    let (s, v) = json_call(&app1, "POST", "/api/sessions", Some(json!({"team_id": "b", "round": "r1"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let b: SessionView = serde_json::from_value(v).unwrap();
    let (s, _) = json_call(&app1, "POST", "/api/sessions", Some(json!({"team_id": "a", "round": "r1"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let base = format!("/api/sessions/{}/clusters/0", a.session_id);
    let (s, _) = json_call(&app1, "POST", &format!("{base}/descriptions"), Some(terms(&["x"]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = json_call(&app1, "POST", &format!("{base}/reveal-initial"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = json_call(&app1, "POST", &format!("{base}/descriptions"), Some(terms(&["a", "b", "c", "d"]))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("at most 3"));

    // Restart: a fresh router over the same directory sees the same state.
    let app2 = app(dir.path());
    let (_, v) = json_call(&app2, "GET", &format!("/api/sessions/{}", a.session_id), None).await;
    let restored: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(restored.clusters[0].stage, biomarker_core::review::Stage::Describing);
    assert_eq!(restored.clusters[0].initial.len(), 10);

    let (s, _) = json_call(&app2, "POST", &format!("{base}/descriptions"), Some(terms(&["Large drusen"]))).await;
    assert_eq!(s, StatusCode::OK);
    json_call(&app2, "POST", &format!("{base}/reveal-validation"), None).await;
    json_call(&app2, "POST", &format!("{base}/finalize"), Some(json!({"decision": "confirm"}))).await;
    review_cluster(&app2, &a.session_id, 1, terms(&["subretinal fluid"]), json!({"decision": "confirm"})).await;
    review_cluster(&app2, &a.session_id, 2, json!({"heterogeneous": true}), json!({"decision": "heterogeneous"})).await;

    let (s, _) = json_call(&app2, "GET", "/api/rounds/r1/consensus", None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    review_cluster(&app2, &b.session_id, 0, terms(&["large  drusen"]), json!({"decision": "confirm"})).await;
    review_cluster(
        &app2,
        &b.session_id,
        1,
        terms(&["fluid"]),
        json!({"decision": "revise", "descriptions": terms(&["intraretinal fluid", "DLS"])}),
    )
    .await;
    review_cluster(&app2, &b.session_id, 2, json!({"heterogeneous": true}), json!({"decision": "heterogeneous"})).await;

    let (s, v) = json_call(&app2, "GET", "/api/rounds/r1/consensus", None).await;
    assert_eq!(s, StatusCode::OK);
    let d: Dashboard = serde_json::from_value(v).unwrap();
    assert_eq!((d.agree, d.pending, d.heterogeneous), (vec![0], vec![1], vec![2]));

    let ruling = json!({"cluster": 1, "consensus": "disagree", "note": "different compartments"});
    let (s, _) = call_with(&app2, "POST", "/api/rounds/r1/adjudications", Some(ruling.clone()), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, body) = call_with(&app2, "POST", "/api/rounds/r1/adjudications", Some(ruling), Some("secret")).await;
    assert_eq!(s, StatusCode::OK);
    let d: Dashboard = serde_json::from_slice(&body).unwrap();
    assert_eq!(d.disagree, vec![1]);
    assert!(d.pending.is_empty());

    let app3 = app(dir.path());
    let (_, v) = json_call(&app3, "GET", "/api/rounds/r1/consensus", None).await;
    let d: Dashboard = serde_json::from_value(v).unwrap();
    assert_eq!(d.disagree, vec![1]);
    let (_, v) = json_call(&app3, "GET", &format!("/api/sessions/{}", b.session_id), None).await;
    let sb: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(sb.clusters[1].archived.len(), 1);
    assert!(sb.complete);
}

#[tokio::test]
async fn lookups_and_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    GrayImage::filled(4, 4, 0.5).save_png(&dir.path().join("images/c0i0.png")).unwrap();
    let app = app(dir.path());

    let (s, v) = json_call(&app, "GET", "/api/clusters", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v[0]["reveal_size"], 10);

    let (s, v) = json_call(&app, "GET", "/api/clusters/0/cross-reference", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["label"], "early_intermediate");
    assert_eq!(v["related"][0]["cluster"], 2);
    let (s, _) = json_call(&app, "GET", "/api/clusters/9/cross-reference", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _) = json_call(&app, "GET", "/api/sessions/nope.x", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, "POST", "/api/sessions", Some(json!({"team_id": "../x", "round": "r"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, bytes) = call(&app, "GET", "/api/images/c0i0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[1..4], b"PNG");
    let (s, _) = call(&app, "GET", "/api/images/c0i1", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/images/..%2Fsecret", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
