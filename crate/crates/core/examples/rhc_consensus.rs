//! Consolidate one simulated image with every strategy.
//!
//! The reference call hallucinates a box; the perturbed views rarely agree
//! with it, so its consensus score falls well below the true boxes'.

use ddl_core::consolidation::consolidate;
use ddl_core::geometry::invert_transform;
use ddl_core::lvlm_client::{mock_ground, Detection, DetectionSet, MockNoise};
use ddl_core::viewgen::make_roster;
use ddl_core::{BoundingBox, ConsensusConfig, ImageDims, Strategy, TransformSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(256, 256)?;
    let truth = vec![
        BoundingBox::new(60.0, 70.0, 110.0, 120.0)?,
        BoundingBox::new(150.0, 140.0, 190.0, 200.0)?,
    ];
    let noise = MockNoise::new(3.0, 0.2, 0.0);

    let mut reference = mock_ground(
        &truth,
        dims,
        &TransformSpec::Identity,
        MockNoise::new(3.0, 0.0, 0.0),
        1,
    );
    reference.detections.push(Detection {
        bbox: BoundingBox::new(30.0, 180.0, 70.0, 220.0)?,
        label: "abnormality".into(),
    });

    let roster = make_roster(7, 7)?;
    let views: Vec<DetectionSet> = roster
        .specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut set = mock_ground(&truth, dims, spec, noise, 100 + i as u64);
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

    let cfg = ConsensusConfig::default();
    for strategy in [Strategy::Rhc, Strategy::Wa, Strategy::Sa, Strategy::Dbscan] {
        println!("{strategy}");
        for d in consolidate(strategy, &reference, &views, &cfg)? {
            let sigma = d.sigma.map_or("-".to_string(), |s| format!("{s:.3}"));
            println!(
                "  {:>30}  score {sigma}",
                format!("{:.1?}", d.bbox.to_array())
            );
        }
    }
    Ok(())
}
