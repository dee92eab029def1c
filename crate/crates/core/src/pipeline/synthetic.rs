//! Seeded synthetic corpora and simulated models for offline runs.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::MockSettings;
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::dape::VANILLA_PROMPT;
use crate::geometry::{iou, BoundingBox, ImageDims};
use crate::lvlm_client::{MockGrounder, MockNoise, ScriptedMeta, INIT_VARIANT_COUNT};

/// Boxes stay this far from every edge so that ±20 px shifts, ±10 %
/// rescaling and ±3° rotation never push them off the canvas.
pub const SAFE_MARGIN: f64 = 48.0;
pub const SIDE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub n_dev: usize,
    pub n_test: usize,
    pub side: u32,
    pub max_boxes: usize,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_dev: 8,
            n_test: 24,
            side: SIDE,
            max_boxes: 2,
            min_box: 20.0,
            max_box: 56.0,
        }
    }
}

/// Images of `side`² pixels with 1..=max_boxes non-overlapping boxes each.
/// Paths point nowhere; the simulator never needs pixels.
pub fn synthetic_corpus(seed: u64, spec: &CorpusSpec) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = spec.side as f64;
    let lo = SAFE_MARGIN;
    let hi = side - SAFE_MARGIN;
    assert!(
        hi - lo > spec.max_box,
        "canvas too small for the requested boxes"
    );
    let mut entries = Vec::with_capacity(spec.n_dev + spec.n_test);
    for i in 0..spec.n_dev + spec.n_test {
        let split = if i < spec.n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let id = format!(
            "{}_{i:04}",
            if split == Split::Dev { "dev" } else { "test" }
        );
        let want = rng.random_range(1..=spec.max_boxes.max(1));
        let mut boxes: Vec<BoundingBox> = Vec::new();
        for _ in 0..50 * want {
            if boxes.len() == want {
                break;
            }
            let w = rng.random_range(spec.min_box..=spec.max_box);
            let h = rng.random_range(spec.min_box..=spec.max_box);
            let x = rng.random_range(lo..=hi - w);
            let y = rng.random_range(lo..=hi - h);
            let b = BoundingBox::new(x.round(), y.round(), (x + w).round(), (y + h).round())
                .expect("positive extent");
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                boxes.push(b);
            }
        }
        entries.push(ManifestEntry {
            image_id: id.clone(),
            image_path: PathBuf::from(format!("synthetic/{id}.png")),
            ground_truth: boxes,
            label: "abnormality".into(),
            split,
            width: Some(spec.side),
            height: Some(spec.side),
        });
    }
    DatasetManifest::new(entries).expect("generated ids are unique")
}

/// Simulator answering for every manifest image with its ground truth.
pub fn mock_grounder(
    manifest: &DatasetManifest,
    seed: u64,
    settings: &MockSettings,
) -> MockGrounder {
    let mut g = MockGrounder::new(seed, settings.noise())
        .with_image_jitter(settings.image_jitter_px)
        .with_sampling_jitter(settings.sampling_jitter_px);
    for e in &manifest.entries {
        let dims = e.dims().unwrap_or(ImageDims {
            width: SIDE,
            height: SIDE,
        });
        g.insert_image(e.image_id.clone(), dims, e.ground_truth.clone());
    }
    g
}

/// Prompts the scripted meta-optimizer hands out: five seeds, then refinements.
pub fn scripted_prompts() -> (Vec<String>, Vec<String>) {
    let seeds = [
        "Analyze this MRI image step-by-step and return bounding boxes in JSON format.",
        "Act as an expert neuroradiologist and flag abnormal regions as JSON boxes.",
        "List every abnormal area as {\"bbox_2d\": [x1, y1, x2, y2], \"label\": \"label\"}.",
        "Find lesions, tumors or infarcts. Answer with JSON boxes or \"no target\".",
        "Locate abnormalities precisely; output a JSON list of 2D bounding boxes.",
    ];
    let refinements = [
        "Act as an expert neuroradiologist. Report only clearly abnormal regions as tight JSON boxes.",
        "As an expert neuroradiologist, report only confident abnormal regions as tight JSON boxes; otherwise return \"no target\".",
        "As an expert neuroradiologist, scan systematically and report only confident, tightly bounded abnormal regions as JSON boxes; otherwise return \"no target\".",
    ];
    let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    debug_assert_eq!(seeds.len(), INIT_VARIANT_COUNT);
    (seeds, refinements.iter().map(|s| s.to_string()).collect())
}

/// Scripted meta-optimizer plus a simulator whose hallucination rate
/// depends on the prompt, so prompt search has something to find: later
/// refinements hallucinate less.
pub fn mock_models(
    manifest: &DatasetManifest,
    seed: u64,
    settings: &MockSettings,
) -> (MockGrounder, ScriptedMeta) {
    let (seeds, refinements) = scripted_prompts();
    let base = settings.noise();
    let mut grounder = mock_grounder(manifest, seed, settings);
    grounder = grounder.with_prompt_noise(
        VANILLA_PROMPT,
        MockNoise::new(
            base.jitter_px,
            (base.hallucination_prob * 1.5).min(1.0),
            base.miss_prob,
        ),
    );
    for (i, s) in seeds.iter().enumerate() {
        let factor = 1.6 - 0.15 * i as f64;
        grounder = grounder.with_prompt_noise(
            s.clone(),
            MockNoise::new(
                base.jitter_px,
                (base.hallucination_prob * factor).min(1.0),
                base.miss_prob,
            ),
        );
    }
    for (i, s) in refinements.iter().enumerate() {
        let factor = 0.6 - 0.2 * i as f64;
        grounder = grounder.with_prompt_noise(
            s.clone(),
            MockNoise::new(
                base.jitter_px * 0.75,
                base.hallucination_prob * factor,
                base.miss_prob,
            ),
        );
    }
    let meta = ScriptedMeta::sequence(seeds, refinements);
    (grounder, meta)
}
