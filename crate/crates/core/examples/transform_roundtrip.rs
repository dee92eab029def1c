//! Apply each view of a seeded roster to a box and map it back.
//!
//! `cargo run --example transform_roundtrip -- 42`

use ddl_core::geometry::{apply_transform, invert_transform};
use ddl_core::viewgen::make_roster;
use ddl_core::{iou, BoundingBox, ImageDims};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(42);
    let dims = ImageDims::new(512, 512)?;
    let original = BoundingBox::new(140.0, 180.0, 230.0, 260.0)?;
    let roster = make_roster(seed, 7)?;

    println!("original {:?}", original.to_array());
    for spec in &roster.specs {
        let view = apply_transform(&original, spec, dims)?;
        let back = invert_transform(&view, spec, dims)?;
        println!(
            "{:<45} view {:>32}  back IoU {:.6}",
            format!("{spec:?}"),
            format!("{:.1?}", view.to_array()),
            iou(&original, &back)
        );
    }
    Ok(())
}
