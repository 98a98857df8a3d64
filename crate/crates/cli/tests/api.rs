use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use scenewright::backends::Backends;
use scenewright::narrator::{Engine, FixedClock, StoryConfig, StorySession};
use scenewright::project::{
    encode_project, handle_edit, images_dir, step_session, EditRequest, SessionHandle,
};
use scenewright::tone::{map_tones, Intensity, ToneKnowledgeBase, ToneSpec};
use scenewright_service::api::{router, AppState, PROJECT_FILE};
use scenewright_service::commands::scaffold_config;
use scenewright_service::Runtime;

fn app(data_dir: &Path) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(Runtime::mock().with_fixed_clock(), data_dir));
    (router(state.clone()), state)
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn call_json(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body.map(|b| b.to_string())).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn config(total: u32) -> StoryConfig {
    scaffold_config(total, "Classic Arc", 21)
}

async fn create(app: &Router, config: &StoryConfig) -> String {
    let (status, body) = call_json(
        app,
        Method::POST,
        "/sessions",
        Some(serde_json::to_value(config).unwrap()),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn api_matches_library_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(&dir.path().join("api"));
    let id = create(&app, &config(10)).await;
    let base = format!("/sessions/{id}");

    let (s, first) = call_json(&app, Method::POST, &format!("{base}/step"), None).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    assert_eq!(first["index"], 1);
    assert_eq!(first["stage_name"], "Exposition");
    call_json(&app, Method::POST, &format!("{base}/step"), None).await;
    let (s, twists) = call_json(&app, Method::GET, &format!("{base}/twists?n=2"), None).await;
    assert_eq!(s, StatusCode::OK);
    let twist = twists["twists"][0].as_str().unwrap().to_string();
    assert_eq!(twists["twists"].as_array().unwrap().len(), 2);
    let (s, _) = call_json(
        &app,
        Method::POST,
        &format!("{base}/twists"),
        Some(json!({"twist": twist})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (_, third) = call_json(&app, Method::POST, &format!("{base}/step"), None).await;
    assert_eq!(third["twist_applied"].as_str(), Some(twist.as_str()));
    let (s, edited) = call_json(
        &app,
        Method::PUT,
        &format!("{base}/scenes/1/text"),
        Some(json!({"text": "Captain Rook enters the Old Mill."})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{edited}");
    assert!(edited["scene"]["active_characters"]
        .as_array()
        .unwrap()
        .contains(&json!("Captain Rook")));
    let tones = json!({"tones": [{"tone": "Fear", "intensity": "High"}], "nac_influence": false});
    let (s, _) = call_json(&app, Method::PUT, &format!("{base}/tones"), Some(tones)).await;
    assert_eq!(s, StatusCode::OK);
    let (_, fourth) = call_json(&app, Method::POST, &format!("{base}/step"), None).await;
    let expected = map_tones(
        &[ToneSpec::new("Fear", Intensity::High)],
        &ToneKnowledgeBase::builtin(),
    )
    .unwrap();
    for cue in &expected.soundscape_cues {
        assert!(fourth["soundscape_cues"]
            .as_array()
            .unwrap()
            .contains(&json!(cue)));
    }
    let (s, exported) = call(&app, Method::GET, &format!("{base}/export"), None).await;
    assert_eq!(s, StatusCode::OK);
    let on_disk = std::fs::read(dir.path().join("api").join(&id).join(PROJECT_FILE)).unwrap();
    assert_eq!(exported, on_disk);

    // The same operations through the library.
    let lib_path = dir.path().join("lib").join(PROJECT_FILE);
    let backends = Backends::mock(21, Some(images_dir(&lib_path)));
    let session = StorySession::new(
        config(10),
        &Engine::builtin(),
        backends,
        Arc::new(FixedClock::epoch()),
    )
    .unwrap();
    let mut h = SessionHandle::create("lib", session, Some(lib_path)).unwrap();
    step_session(&mut h).unwrap();
    step_session(&mut h).unwrap();
    handle_edit(&mut h, EditRequest::SelectTwist { twist }).unwrap();
    step_session(&mut h).unwrap();
    handle_edit(
        &mut h,
        EditRequest::SceneText {
            index: 1,
            text: "Captain Rook enters the Old Mill.".into(),
        },
    )
    .unwrap();
    handle_edit(
        &mut h,
        EditRequest::Tones {
            tones: vec![ToneSpec::new("Fear", Intensity::High)],
            nac_influence: Some(false),
        },
    )
    .unwrap();
    step_session(&mut h).unwrap();
    assert_eq!(exported, encode_project(h.project()).into_bytes());
}

#[tokio::test]
async fn cyclic_graph_edit_is_a_structured_422() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = create(&app, &config(5)).await;
    call_json(&app, Method::POST, &format!("/sessions/{id}/step"), None).await;
    let (_, view) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let before = call(&app, Method::GET, &format!("/sessions/{id}/export"), None)
        .await
        .1;

    let mut graph = view["graph"].clone();
    let nodes = graph["nodes"].as_array_mut().unwrap();
    nodes.push(json!({"id": "box", "name": "Box", "node_type": "location", "attributes": {}}));
    nodes.push(json!({"id": "crate", "name": "Crate", "node_type": "location", "attributes": {}}));
    let edges = graph["edges"].as_array_mut().unwrap();
    edges.push(json!({"id": "c1", "source_id": "box", "target_id": "crate", "relation": "INSIDE", "attributes": {}}));
    edges.push(json!({"id": "c2", "source_id": "crate", "target_id": "box", "relation": "INSIDE", "attributes": {}}));
    let (s, body) = call_json(
        &app,
        Method::PUT,
        &format!("/sessions/{id}/scenes/1/graph"),
        Some(graph),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "graph_rejected");
    let kinds: Vec<&str> = body["error"]["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"ContainmentCycle"), "{body}");
    let after = call(&app, Method::GET, &format!("/sessions/{id}/export"), None)
        .await
        .1;
    assert_eq!(before, after);

    let (s, body) = call_json(
        &app,
        Method::PUT,
        &format!("/sessions/{id}/scenes/1/graph"),
        Some(json!({"nodes": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "schema_error");
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (s, _) = call_json(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let mut bad = config(3);
    bad.arc_name = "Heist".into();
    let (s, body) = call_json(
        &app,
        Method::POST,
        "/sessions",
        Some(serde_json::to_value(bad).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"]["message"].as_str().unwrap().contains("Heist"));
    let (s, _) = call(&app, Method::POST, "/sessions", Some("{".into())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let id = create(&app, &config(1)).await;
    let (s, body) = call_json(
        &app,
        Method::GET,
        &format!("/sessions/{id}/twists?n=2"),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "{body}");
    let (s, _) = call_json(&app, Method::POST, &format!("/sessions/{id}/step"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, body) = call_json(&app, Method::POST, &format!("/sessions/{id}/step"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "story_complete");
    let (s, _) = call_json(
        &app,
        Method::GET,
        &format!("/sessions/{id}/twists?n=0"),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_json(
        &app,
        Method::PUT,
        &format!("/sessions/{id}/scenes/7/text"),
        Some(json!({"text": "x"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let tones = json!({"tones": [{"tone": "Whimsy", "intensity": "Low"}]});
    let (s, _) = call_json(
        &app,
        Method::PUT,
        &format!("/sessions/{id}/tones"),
        Some(tones),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_json(
        &app,
        Method::POST,
        &format!("/sessions/{id}/twists"),
        Some(json!({"twist": " "})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_steps_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = create(&app, &config(6)).await;
    let uri = format!("/sessions/{id}/step");
    let calls = (0..6).map(|_| {
        let app = app.clone();
        let uri = uri.clone();
        tokio::spawn(async move { call_json(&app, Method::POST, &uri, None).await })
    });
    let mut indices = Vec::new();
    for c in calls {
        let (s, body) = c.await.unwrap();
        assert_eq!(s, StatusCode::OK, "{body}");
        indices.push(body["index"].as_u64().unwrap());
    }
    indices.sort();
    assert_eq!(indices, vec![1, 2, 3, 4, 5, 6]);
    let (_, view) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["complete"], true);
    assert_eq!(view["next_stage"], Value::Null);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id;
    let exported;
    {
        let (app, state) = app(dir.path());
        id = create(&app, &config(4)).await;
        call_json(&app, Method::POST, &format!("/sessions/{id}/step"), None).await;
        exported = call(&app, Method::GET, &format!("/sessions/{id}/export"), None)
            .await
            .1;
        drop(app);
        drop(state);
    }
    let (app, state) = app(dir.path());
    assert_eq!(state.restore().await, 1);
    let (s, view) = call_json(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["scenes_generated"], 1);
    assert_eq!(view["next_stage"], "Rising Action");
    assert_eq!(
        call(&app, Method::GET, &format!("/sessions/{id}/export"), None)
            .await
            .1,
        exported
    );
    let (s, _) = call_json(&app, Method::POST, &format!("/sessions/{id}/step"), None).await;
    assert_eq!(s, StatusCode::OK);
}
