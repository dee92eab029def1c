#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use ddl_core::geometry::invert_transform;
use ddl_core::lvlm_client::{mock_ground, Detection, DetectionSet, MockNoise};
use ddl_core::viewgen::make_roster;
use ddl_core::{BoundingBox, ImageDims, TransformSpec};

/// Minimal HTTP/1.1 server answering from a script and recording bodies.
pub struct StubServer {
    pub url: String,
    requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

impl StubServer {
    /// Serves `responses` (status, body) in order; the last one repeats.
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let mut queue: VecDeque<(u16, String)> = responses.into();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0; len];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                log.lock()
                    .unwrap()
                    .push(serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null));
                let (status, payload) = if queue.len() > 1 {
                    queue.pop_front().unwrap()
                } else {
                    queue.front().cloned().unwrap_or((500, String::new()))
                };
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self { url, requests }
    }

    pub fn requests(&self) -> Vec<serde_json::Value> {
        self.requests.lock().unwrap().clone()
    }
}

/// Chat-completions body whose assistant message is `content`.
pub fn completion(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "content": content } }] }).to_string()
}

/// A box at least `margin` px from every edge of a `side`² canvas.
pub fn interior_box(
    rng: &mut impl rand::Rng,
    side: f64,
    margin: f64,
    min: f64,
    max: f64,
) -> BoundingBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(margin..side - margin - w);
    let y = rng.random_range(margin..side - margin - h);
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

/// Reference call plus M back-projected perturbed views of one simulated image.
pub fn simulate_views(
    truth: &[BoundingBox],
    dims: ImageDims,
    reference_noise: MockNoise,
    view_noise: MockNoise,
    seed: u64,
    m: usize,
) -> (DetectionSet, Vec<DetectionSet>) {
    let reference = mock_ground(truth, dims, &TransformSpec::Identity, reference_noise, seed);
    let roster = make_roster(seed ^ 0x5eed, m).unwrap();
    let views = roster
        .specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut set = mock_ground(
                truth,
                dims,
                spec,
                view_noise,
                seed.wrapping_add(1 + i as u64),
            );
            set.view_index = i + 1;
            set.detections = set
                .detections
                .into_iter()
                .filter_map(|d| {
                    let bbox = invert_transform(&d.bbox, spec, dims).ok()?;
                    Some(Detection { bbox, ..d })
                })
                .collect();
            set
        })
        .collect();
    (reference, views)
}
