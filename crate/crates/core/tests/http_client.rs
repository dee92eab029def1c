mod common;

use std::time::Duration;

use common::{completion, StubServer};
use ddl_core::lvlm_client::{
    ground, ChatClient, ChatMetaOptimizer, ClientError, GroundRequest, Grounder, HttpGrounder,
    MetaOptimizer, MetaPromptKind, ModelEndpoint, Proposal,
};
use ddl_core::viewgen::RasterImage;
use ddl_core::{ImageDims, TransformSpec};

fn client(url: &str, retries: u32) -> ChatClient {
    let mut ep = ModelEndpoint::new(url, "test-model");
    ep.max_retries = retries;
    ep.timeout_secs = 5.0;
    ep.api_key_env = None;
    ChatClient::new(ep)
        .unwrap()
        .with_backoff(Duration::from_millis(1))
}

fn image() -> RasterImage {
    let dims = ImageDims::new(64, 48).unwrap();
    RasterImage::new(dims, 3, vec![90; 64 * 48 * 3], "flat").unwrap()
}

#[test]
fn sends_image_and_prompt_and_parses_boxes() {
    let server = StubServer::start(vec![(
        200,
        completion(r#"[{"bbox_2d": [4, 6, 30, 40], "label": "tumor"}]"#),
    )]);
    let set = ground(&client(&server.url, 0), &image(), "find it", 0.0).unwrap();
    assert_eq!(set.detections.len(), 1);
    assert_eq!(set.detections[0].bbox.to_array(), [4.0, 6.0, 30.0, 40.0]);
    assert_eq!(set.detections[0].label, "tumor");

    let body = &server.requests()[0];
    assert_eq!(body["model"], "test-model");
    let parts = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "image_url");
    assert!(parts[0]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(parts[1]["text"], "find it");
}

#[test]
fn no_target_is_an_empty_set() {
    let server = StubServer::start(vec![(200, completion("no target"))]);
    let set = ground(&client(&server.url, 0), &image(), "p", 0.0).unwrap();
    assert!(set.detections.is_empty());
}

#[test]
fn retries_transient_failures_then_succeeds() {
    let server = StubServer::start(vec![
        (503, String::new()),
        (429, String::new()),
        (200, completion("no target")),
    ]);
    ground(&client(&server.url, 3), &image(), "p", 0.0).unwrap();
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn gives_up_after_the_retry_budget() {
    let server = StubServer::start(vec![(500, String::new())]);
    let err = ground(&client(&server.url, 2), &image(), "p", 0.0).unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)), "{err}");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(vec![(400, "bad request".into())]);
    let err = ground(&client(&server.url, 3), &image(), "p", 0.0).unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn empty_completion_is_a_refusal() {
    let server = StubServer::start(vec![(200, completion(""))]);
    let err = ground(&client(&server.url, 0), &image(), "p", 0.0).unwrap_err();
    assert!(matches!(err, ClientError::ModelRefusal));
}

#[test]
fn grounder_forwards_temperature() {
    let server = StubServer::start(vec![(200, completion("no target"))]);
    let grounder = HttpGrounder::new(client(&server.url, 0));
    let img = image();
    let set = grounder
        .ground(&GroundRequest {
            image_id: "a",
            view_index: 3,
            spec: TransformSpec::Identity,
            dims: img.dims(),
            image: Some(&img),
            prompt: "p",
            temperature: 1.0,
        })
        .unwrap();
    assert_eq!(set.view_index, 3);
    assert_eq!(server.requests()[0]["temperature"], 1.0);
}

#[test]
fn grounder_requires_pixels() {
    let grounder = HttpGrounder::new(client("http://127.0.0.1:9", 0));
    let err = grounder
        .ground(&GroundRequest {
            image_id: "a",
            view_index: 0,
            spec: TransformSpec::Identity,
            dims: ImageDims::new(4, 4).unwrap(),
            image: None,
            prompt: "p",
            temperature: 0.0,
        })
        .unwrap_err();
    assert!(matches!(err, ClientError::Image(_)));
}

#[test]
fn meta_optimizer_parses_variants_and_improved_prompt() {
    let variants = (1..=5)
        .map(|i| format!("\"variant_{i}\": \"prompt {i}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let server = StubServer::start(vec![
        (200, completion(&format!("{{{variants}}}"))),
        (
            200,
            completion("thinking...\n<IMPROVED_PROMPT>Be precise.</IMPROVED_PROMPT>"),
        ),
        (200, completion("no tags here")),
    ]);
    let mut ep = ModelEndpoint::meta(&server.url, "meta");
    ep.api_key_env = None;
    let meta = ChatMetaOptimizer::new(ChatClient::new(ep).unwrap());

    match meta.propose(MetaPromptKind::Init, "ctx").unwrap() {
        Proposal::Variants(v) => assert_eq!(v[4], "prompt 5"),
        other => panic!("{other:?}"),
    }
    assert_eq!(
        meta.propose(MetaPromptKind::Contrastive, "ctx").unwrap(),
        Proposal::Improved("Be precise.".into())
    );
    assert!(matches!(
        meta.propose(MetaPromptKind::Exploitative, "ctx"),
        Err(ClientError::TagMissing { .. })
    ));
    let reqs = server.requests();
    assert_eq!(reqs[0]["temperature"], 0.7);
    assert_eq!(reqs[0]["top_p"], 0.9);
    assert_eq!(reqs[0]["messages"][0]["content"], "ctx");
}
