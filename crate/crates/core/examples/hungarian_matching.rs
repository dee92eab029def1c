//! One-to-one matching of reference boxes to a view's boxes by 1 - IoU.

use ddl_core::consolidation::{assignment_cost, hungarian, CostMatrix};
use ddl_core::{iou, BoundingBox};

fn main() -> Result<(), ddl_core::geometry::GeometryError> {
    let anchors = [
        BoundingBox::new(10.0, 10.0, 50.0, 50.0)?,
        BoundingBox::new(60.0, 60.0, 100.0, 100.0)?,
    ];
    // A near-duplicate of the first anchor, a shifted second, and a stray box.
    let candidates = [
        BoundingBox::new(62.0, 58.0, 101.0, 99.0)?,
        BoundingBox::new(150.0, 20.0, 180.0, 40.0)?,
        BoundingBox::new(12.0, 9.0, 49.0, 52.0)?,
    ];
    let costs = CostMatrix::from_boxes(&anchors, &candidates);
    let pairs = hungarian(&costs);
    for &(a, c) in &pairs {
        println!(
            "anchor {a} -> candidate {c}  IoU {:.3}",
            iou(&anchors[a], &candidates[c])
        );
    }
    println!("total cost {:.4}", assignment_cost(&costs, &pairs));
    Ok(())
}
