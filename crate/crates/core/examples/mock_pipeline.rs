//! Full offline run: synthetic corpus, prompt search, multi-view grounding,
//! consolidation, evaluation and artifacts.
//!
//! `cargo run --example mock_pipeline -- <seed> [out-dir]`

use std::path::PathBuf;

use ddl_core::evalcal::improvement_table;
use ddl_core::pipeline::synthetic::{mock_models, synthetic_corpus, CorpusSpec};
use ddl_core::pipeline::with_strategy;
use ddl_core::{run_ddl, RunConfig, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(11);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ddl-mock"));

    let manifest = synthetic_corpus(seed, &CorpusSpec::default());
    let mut cfg = RunConfig::mock(seed);
    cfg.max_generations = 3;
    let settings = cfg.mock.expect("mock settings");
    let (grounder, meta) = mock_models(&manifest, seed, &settings);

    let rhc = run_ddl(&cfg, &manifest, &grounder, &meta)?;
    rhc.persist(&out)?;
    println!("prompt: {}", rhc.prompt);
    println!("RHC  {}", rhc.report.map);

    let mut sa_cfg = with_strategy(&cfg, Strategy::Sa);
    sa_cfg.prompt = Some(rhc.prompt.clone());
    let sa = run_ddl(&sa_cfg, &manifest, &grounder, &meta)?;
    println!("SA   {}", sa.report.map);
    for row in improvement_table(&sa.report.map, &rhc.report.map) {
        println!("  {} {}", row.metric, row.rendered);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
