//! Deterministic stand-ins for the grounding model and the meta-optimizer.
//!
//! The simulated grounder sees the true boxes of an image and reproduces the
//! failure modes the consensus machinery is meant to catch: coordinate
//! jitter, missed findings, and hallucinated boxes that land somewhere new on
//! every call.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ClientError, Detection, DetectionSet, GroundRequest, Grounder, MetaOptimizer, MetaPromptKind,
    Proposal,
};
use crate::geometry::{apply_transform, BoundingBox, ImageDims, TransformSpec};
use crate::seeding;

pub const MOCK_LABEL: &str = "abnormality";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockNoise {
    /// Uniform per-coordinate jitter amplitude in view pixels.
    pub jitter_px: f64,
    pub hallucination_prob: f64,
    pub miss_prob: f64,
}

impl MockNoise {
    pub const NONE: MockNoise = MockNoise {
        jitter_px: 0.0,
        hallucination_prob: 0.0,
        miss_prob: 0.0,
    };

    pub fn new(jitter_px: f64, hallucination_prob: f64, miss_prob: f64) -> Self {
        Self {
            jitter_px: jitter_px.max(0.0),
            hallucination_prob: hallucination_prob.clamp(0.0, 1.0),
            miss_prob: miss_prob.clamp(0.0, 1.0),
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, amplitude: f64) -> f64 {
    if amplitude > 0.0 {
        rng.random_range(-amplitude..=amplitude)
    } else {
        0.0
    }
}

/// Simulate one call on the view of an image of extent `dims` produced by
/// `spec`. Output boxes are in the view frame.
pub fn mock_ground(
    truth: &[BoundingBox],
    dims: ImageDims,
    spec: &TransformSpec,
    noise: MockNoise,
    seed: u64,
) -> DetectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view_dims = spec.output_dims(dims);
    let mut set = DetectionSet::default();
    for b in truth {
        let missed = rng.random::<f64>() < noise.miss_prob;
        let offsets: [f64; 4] = std::array::from_fn(|_| jitter(&mut rng, noise.jitter_px));
        if missed {
            continue;
        }
        let Ok(mapped) = apply_transform(b, spec, dims) else {
            set.dropped += 1;
            continue;
        };
        let c = mapped.to_array();
        let noisy = BoundingBox::new(
            c[0] + offsets[0],
            c[1] + offsets[1],
            c[2] + offsets[2],
            c[3] + offsets[3],
        )
        .and_then(|b| b.clamp_to(view_dims));
        match noisy {
            Ok(bbox) => set.detections.push(Detection {
                bbox,
                label: MOCK_LABEL.to_string(),
            }),
            Err(_) => set.dropped += 1,
        }
    }
    if rng.random::<f64>() < noise.hallucination_prob {
        set.detections.push(Detection {
            bbox: random_box(&mut rng, view_dims),
            label: MOCK_LABEL.to_string(),
        });
    }
    set
}

/// Box covering 10-30% of each side, placed uniformly inside the frame.
fn random_box(rng: &mut ChaCha8Rng, dims: ImageDims) -> BoundingBox {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    let bw = w * rng.random_range(0.1..0.3);
    let bh = h * rng.random_range(0.1..0.3);
    let x1 = rng.random_range(0.0..(w - bw));
    let y1 = rng.random_range(0.0..(h - bh));
    BoundingBox::new(x1, y1, x1 + bw, y1 + bh).expect("hallucinated box has positive area")
}

#[derive(Debug, Clone)]
struct MockImage {
    dims: ImageDims,
    boxes: Vec<BoundingBox>,
}

/// Simulated grounding model keyed by image id.
///
/// Three jitter sources compose: `image_jitter_px` is drawn once per image
/// and shared by every call on it (a systematic localization bias that
/// survives back-projection), `noise.jitter_px` is fresh per call, and
/// `sampling_jitter_px` is added per call only when the request temperature
/// is positive, standing in for stochastic decoding.
#[derive(Debug, Clone)]
pub struct MockGrounder {
    images: HashMap<String, MockImage>,
    seed: u64,
    noise: MockNoise,
    image_jitter_px: f64,
    sampling_jitter_px: f64,
    prompt_noise: HashMap<String, MockNoise>,
}

impl MockGrounder {
    pub fn new(seed: u64, noise: MockNoise) -> Self {
        Self {
            images: HashMap::new(),
            seed,
            noise,
            image_jitter_px: 0.0,
            sampling_jitter_px: 0.0,
            prompt_noise: HashMap::new(),
        }
    }

    pub fn with_image(
        mut self,
        id: impl Into<String>,
        dims: ImageDims,
        boxes: Vec<BoundingBox>,
    ) -> Self {
        self.insert_image(id, dims, boxes);
        self
    }

    pub fn insert_image(
        &mut self,
        id: impl Into<String>,
        dims: ImageDims,
        boxes: Vec<BoundingBox>,
    ) {
        self.images.insert(id.into(), MockImage { dims, boxes });
    }

    pub fn with_image_jitter(mut self, px: f64) -> Self {
        self.image_jitter_px = px.max(0.0);
        self
    }

    pub fn with_sampling_jitter(mut self, px: f64) -> Self {
        self.sampling_jitter_px = px.max(0.0);
        self
    }

    /// Use `noise` instead of the default whenever the prompt is exactly `prompt`.
    pub fn with_prompt_noise(mut self, prompt: impl Into<String>, noise: MockNoise) -> Self {
        self.prompt_noise.insert(prompt.into(), noise);
        self
    }

    fn biased_truth(&self, id: &str, image: &MockImage) -> Vec<BoundingBox> {
        if self.image_jitter_px <= 0.0 {
            return image.boxes.clone();
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive(self.seed, &[seeding::hash_str(id), 0xb1a5]));
        image
            .boxes
            .iter()
            .filter_map(|b| {
                let c = b.to_array();
                let d: [f64; 4] = std::array::from_fn(|_| jitter(&mut rng, self.image_jitter_px));
                BoundingBox::new(c[0] + d[0], c[1] + d[1], c[2] + d[2], c[3] + d[3])
                    .and_then(|b| b.clamp_to(image.dims))
                    .ok()
            })
            .collect()
    }
}

impl Grounder for MockGrounder {
    fn ground(&self, req: &GroundRequest<'_>) -> Result<DetectionSet, ClientError> {
        let image = self
            .images
            .get(req.image_id)
            .ok_or_else(|| ClientError::UnknownImage(req.image_id.to_string()))?;
        let mut noise = self
            .prompt_noise
            .get(req.prompt)
            .copied()
            .unwrap_or(self.noise);
        if req.temperature > 0.0 {
            noise.jitter_px += self.sampling_jitter_px;
        }
        let call_seed = seeding::derive(
            self.seed,
            &[
                seeding::hash_str(req.image_id),
                req.view_index as u64,
                seeding::hash_str(req.prompt),
                req.temperature.to_bits(),
            ],
        );
        let truth = self.biased_truth(req.image_id, image);
        let mut set = mock_ground(&truth, image.dims, &req.spec, noise, call_seed);
        set.view_index = req.view_index;
        Ok(set)
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}

type ScriptFn = dyn Fn(usize, MetaPromptKind, &str) -> Result<String, ClientError> + Send + Sync;

/// Meta-optimizer that answers from a script and records every context.
pub struct ScriptedMeta {
    init: Vec<String>,
    script: Box<ScriptFn>,
    calls: AtomicUsize,
    contexts: Mutex<Vec<(MetaPromptKind, String)>>,
}

impl ScriptedMeta {
    /// `script(n, kind, context)` answers the n-th refinement request (0-based).
    pub fn from_fn<F>(init: Vec<String>, script: F) -> Self
    where
        F: Fn(usize, MetaPromptKind, &str) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self {
            init,
            script: Box::new(script),
            calls: AtomicUsize::new(0),
            contexts: Mutex::new(Vec::new()),
        }
    }

    /// Always proposes `text`.
    pub fn constant(init: Vec<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(init, move |_, _, _| Ok(text.clone()))
    }

    /// Proposes `texts` in order, repeating the last one once exhausted.
    pub fn sequence(init: Vec<String>, texts: Vec<String>) -> Self {
        assert!(
            !texts.is_empty(),
            "scripted sequence needs at least one prompt"
        );
        Self::from_fn(init, move |n, _, _| {
            Ok(texts[n.min(texts.len() - 1)].clone())
        })
    }

    pub fn contexts(&self) -> Vec<(MetaPromptKind, String)> {
        self.contexts.lock().expect("context log poisoned").clone()
    }
}

impl MetaOptimizer for ScriptedMeta {
    fn propose(&self, kind: MetaPromptKind, context: &str) -> Result<Proposal, ClientError> {
        self.contexts
            .lock()
            .expect("context log poisoned")
            .push((kind, context.to_string()));
        match kind {
            MetaPromptKind::Init => {
                if self.init.len() != super::INIT_VARIANT_COUNT {
                    return Err(ClientError::VariantCountMismatch {
                        expected: super::INIT_VARIANT_COUNT,
                        found: self.init.len(),
                    });
                }
                Ok(Proposal::Variants(self.init.clone()))
            }
            _ => {
                let n = self.calls.fetch_add(1, Ordering::SeqCst);
                (self.script)(n, kind, context).map(Proposal::Improved)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::invert_transform;
    use crate::viewgen::make_roster;

    fn truth() -> Vec<BoundingBox> {
        vec![
            BoundingBox::new(30.0, 40.0, 70.0, 90.0).unwrap(),
            BoundingBox::new(120.0, 100.0, 150.0, 140.0).unwrap(),
        ]
    }

    fn dims() -> ImageDims {
        ImageDims::new(200, 180).unwrap()
    }

    #[test]
    fn noiseless_identity_returns_truth() {
        let set = mock_ground(
            &truth(),
            dims(),
            &TransformSpec::Identity,
            MockNoise::NONE,
            9,
        );
        assert_eq!(set.boxes(), truth());
    }

    #[test]
    fn full_miss_is_empty() {
        let set = mock_ground(
            &truth(),
            dims(),
            &TransformSpec::Identity,
            MockNoise::new(0.0, 0.0, 1.0),
            9,
        );
        assert!(set.is_empty());
    }

    #[test]
    fn jitter_is_seed_deterministic() {
        let noise = MockNoise::new(2.0, 0.5, 0.0);
        let a = mock_ground(&truth(), dims(), &TransformSpec::Identity, noise, 42);
        let b = mock_ground(&truth(), dims(), &TransformSpec::Identity, noise, 42);
        assert_eq!(a, b);
        let c = mock_ground(&truth(), dims(), &TransformSpec::Identity, noise, 43);
        assert_ne!(a, c);
        for (got, want) in a.boxes().iter().zip(truth()) {
            for (g, w) in got.to_array().iter().zip(want.to_array()) {
                assert!((g - w).abs() <= 2.0);
            }
        }
    }

    #[test]
    fn noiseless_commutes_with_back_projection() {
        for seed in 0..5 {
            for spec in make_roster(seed, 7).unwrap().specs {
                let set = mock_ground(&truth(), dims(), &spec, MockNoise::NONE, seed);
                for (got, want) in set.boxes().iter().zip(truth()) {
                    let back = invert_transform(got, &spec, dims()).unwrap();
                    for (g, w) in back.to_array().iter().zip(want.to_array()) {
                        assert!((g - w).abs() < 1e-9, "{spec:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn hallucinations_move_between_calls() {
        let noise = MockNoise::new(0.0, 1.0, 0.0);
        let a = mock_ground(&[], dims(), &TransformSpec::Identity, noise, 1);
        let b = mock_ground(&[], dims(), &TransformSpec::Identity, noise, 2);
        assert_eq!(a.len(), 1);
        assert_ne!(a.boxes(), b.boxes());
        assert!(a.boxes()[0].is_within(dims()));
    }

    #[test]
    fn grounder_image_bias_is_shared_across_views() {
        let g = MockGrounder::new(3, MockNoise::NONE)
            .with_image("img", dims(), truth())
            .with_image_jitter(3.0);
        let req = |view_index| GroundRequest {
            image_id: "img",
            view_index,
            spec: TransformSpec::Identity,
            dims: dims(),
            image: None,
            prompt: "p",
            temperature: 0.0,
        };
        let a = g.ground(&req(0)).unwrap();
        let b = g.ground(&req(5)).unwrap();
        assert_eq!(a.boxes(), b.boxes());
        assert_ne!(a.boxes(), truth());
        assert!(matches!(
            g.ground(&GroundRequest {
                image_id: "missing",
                ..req(0)
            }),
            Err(ClientError::UnknownImage(_))
        ));
    }

    #[test]
    fn scripted_meta_counts_variants() {
        let meta = ScriptedMeta::constant(vec!["a".into(); 4], "x");
        assert!(matches!(
            meta.propose(MetaPromptKind::Init, ""),
            Err(ClientError::VariantCountMismatch { found: 4, .. })
        ));
        let meta = ScriptedMeta::sequence(vec!["a".into(); 5], vec!["p1".into(), "p2".into()]);
        let texts: Vec<Proposal> = (0..3)
            .map(|_| meta.propose(MetaPromptKind::Contrastive, "ctx").unwrap())
            .collect();
        assert_eq!(
            texts,
            vec![
                Proposal::Improved("p1".into()),
                Proposal::Improved("p2".into()),
                Proposal::Improved("p2".into())
            ]
        );
        assert_eq!(meta.contexts().len(), 3);
    }
}
