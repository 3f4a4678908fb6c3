//! HTTP service tests against a live listener on an ephemeral port.

use std::net::TcpListener;
use std::sync::Arc;

use kpursuit::config::PipelineConfig;
use kpursuit::corpus::{Fact, FactStore};
use kpursuit::embed::HashedBagEncoder;
use kpursuit::index::VectorIndex;
use kpursuit::pipeline::Pipeline;
use kpursuit::service::router;

/// Start the service on an OS-assigned port and return its base URL.
fn spawn_service(pipeline: Pipeline) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    listener.set_nonblocking(true).unwrap();
    let app = router(Arc::new(pipeline));
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}

fn mock_pipeline(dir: &std::path::Path) -> Pipeline {
    mock_pipeline_with(dir, "")
}

fn mock_pipeline_with(dir: &std::path::Path, extra: &str) -> Pipeline {
    let mut store = FactStore::new(100);
    store
        .add_fact(Fact::new(
            "anchor",
            "",
            "icthyophaga leucogaster names the white bellied sea eagle",
        ))
        .unwrap();
    store
        .add_fact(Fact::new(
            "bridge",
            "",
            "white bellied sea eagle hunts along coastal waters",
        ))
        .unwrap();
    let enc = HashedBagEncoder::new(4096, 512);
    let index = VectorIndex::build(&store, &enc).unwrap();
    let index_path = dir.join("index.bin");
    index.save(&index_path).unwrap();

    let config_text = format!(
        r#"
{extra}

[encoder]
provider = "test"
dim = 4096
max_tokens = 512

[llm]
provider = "mock:echo"

[generator]
backend = "mock"
name = "mock"
modality = "image"

[paths]
index = "{}"
"#,
        index_path.display()
    );
    let config = PipelineConfig::from_toml(&config_text).unwrap();
    Pipeline::from_config(&config).unwrap()
}

#[test]
fn health_enhance_and_synthesize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = spawn_service(mock_pipeline(dir.path()));
    let client = reqwest::blocking::Client::new();

    let health: serde_json::Value = client
        .get(format!("{base}/health"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(health["status"], "ok");

    let enhance: serde_json::Value = client
        .post(format!("{base}/enhance"))
        .json(&serde_json::json!({"prompt": "icthyophaga leucogaster"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(
        enhance["enhanced_prompt"]["text"],
        "icthyophaga leucogaster"
    );
    assert_eq!(
        enhance["enhanced_prompt"]["provenance"]["fact_ids"][0],
        "anchor"
    );
    assert!(!enhance["trace"]["steps"].as_array().unwrap().is_empty());

    let synth: serde_json::Value = client
        .post(format!("{base}/synthesize"))
        .json(&serde_json::json!({"prompt": "icthyophaga leucogaster"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let artifacts = synth["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 1);
    assert_eq!(artifacts[0]["sha256"].as_str().unwrap().len(), 64);
    // No output directory configured, so the payload rides inline.
    assert_eq!(artifacts[0]["payload_hex"].as_str().unwrap().len(), 64);
    assert!(artifacts[0]["path"].is_null());
}

#[test]
fn overrides_shape_the_pursuit_session() {
    let dir = tempfile::tempdir().unwrap();
    let base = spawn_service(mock_pipeline(dir.path()));
    let client = reqwest::blocking::Client::new();

    let response: serde_json::Value = client
        .post(format!("{base}/enhance"))
        .json(&serde_json::json!({
            "prompt": "icthyophaga leucogaster",
            "overrides": {"max_facts": 1}
        }))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(response["trace"]["steps"].as_array().unwrap().len(), 1);
    assert_eq!(response["trace"]["stop_reason"], "max-steps");

    let bad = client
        .post(format!("{base}/enhance"))
        .json(&serde_json::json!({
            "prompt": "x",
            "overrides": {"policy": "middle-out"}
        }))
        .send()
        .unwrap();
    assert_eq!(bad.status().as_u16(), 400);

    // An empty prompt is a client error even though it surfaces deep in the
    // pursuit stage.
    let empty = client
        .post(format!("{base}/enhance"))
        .json(&serde_json::json!({"prompt": "  "}))
        .send()
        .unwrap();
    assert_eq!(empty.status().as_u16(), 400);
}

#[test]
fn synthesize_references_point_at_persisted_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let pipeline = mock_pipeline_with(
        dir.path(),
        &format!("output_dir = \"{}\"", out.display()),
    );
    let base = spawn_service(pipeline);
    let client = reqwest::blocking::Client::new();

    let synth: serde_json::Value = client
        .post(format!("{base}/synthesize"))
        .json(&serde_json::json!({"prompt": "icthyophaga leucogaster"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let artifact = &synth["artifacts"][0];
    assert!(artifact["payload_hex"].is_null());
    let path = std::path::PathBuf::from(artifact["path"].as_str().unwrap());
    // The referenced file exists and matches the reported digest.
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(
        kpursuit::aggregate::sha256_hex(&bytes),
        artifact["sha256"].as_str().unwrap()
    );
}

#[test]
fn concurrent_requests_get_isolated_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let base = spawn_service(mock_pipeline(dir.path()));

    let handles: Vec<_> = (0..6)
        .map(|_| {
            let base = base.clone();
            std::thread::spawn(move || {
                let client = reqwest::blocking::Client::new();
                let response: serde_json::Value = client
                    .post(format!("{base}/enhance"))
                    .json(&serde_json::json!({"prompt": "icthyophaga leucogaster"}))
                    .send()
                    .unwrap()
                    .json()
                    .unwrap();
                response["enhanced_prompt"]["provenance"]["fact_ids"]
                    .as_array()
                    .unwrap()
                    .len()
            })
        })
        .collect();
    for handle in handles {
        // Every session sees the full index: both facts, no cross-session
        // exclusions.
        assert_eq!(handle.join().unwrap(), 2);
    }
}
