//! Prompt search against a scripted meta-optimizer and a toy scorer.

use ddl_core::dape::{run_dape, window_size, DapeError, VANILLA_PROMPT};
use ddl_core::lvlm_client::ScriptedMeta;

const KEYWORDS: [&str; 4] = ["tight", "confident", "systematic", "expert"];

fn main() -> Result<(), DapeError> {
    let seeds = (1..=5)
        .map(|i| format!("Locate abnormal regions (variant {i})."))
        .collect();
    let meta = ScriptedMeta::from_fn(seeds, |n, _kind, _ctx| {
        let extra = KEYWORDS[..(n + 1).min(KEYWORDS.len())].join(", ");
        Ok(format!("Locate abnormal regions; be {extra}."))
    });
    // Each distinct keyword adds to the score.
    let mut scorer = |p: &str| -> Result<f64, DapeError> {
        let hits = KEYWORDS.iter().filter(|k| p.contains(*k)).count();
        Ok(0.2 + 0.15 * hits as f64 + if p.contains("variant 3") { 0.05 } else { 0.0 })
    };

    let (history, outcome) = run_dape(VANILLA_PROMPT, &meta, &mut scorer, 10)?;
    for r in history.records() {
        println!(
            "g{:<2} {:?} {:.4}  {}",
            r.generation, r.origin, r.score, r.text
        );
    }
    println!(
        "best {:.4} after {} generations (converged at {:?})",
        outcome.best.score, outcome.generations_run, outcome.converged_at
    );
    let windows: Vec<usize> = (1..=10).map(|g| window_size(g, 40)).collect();
    println!("window sizes g=1..10 with 40 candidates: {windows:?}");
    for (kind, _) in meta.contexts() {
        print!("{kind:?} ");
    }
    println!();
    Ok(())
}
