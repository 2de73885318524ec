//! Run the four comparison modes on the same seeded scenarios and print the
//! markdown evaluation tables.
//!
//! ```bash
//! cargo run --release --example evaluate_modes
//! ```

use coopsim::harness::{run_mode, ExperimentConfig, Mode, ReportDoc};
use coopsim::report::{render, ReportFormat};

fn main() -> coopsim::Result<()> {
    let mut cfg = ExperimentConfig {
        seeds: (0..10).collect(),
        ..Default::default()
    };

    let mut records = Vec::new();
    for mode in [
        Mode::NoFusion,
        Mode::LateFusion,
        Mode::Univ2x,
        Mode::DenseBev,
    ] {
        cfg.mode = mode;
        eprintln!("running {} over {} seeds...", mode.name(), cfg.seeds.len());
        records.push(run_mode(&cfg)?);
    }

    let doc = ReportDoc {
        config: cfg,
        axis: None,
        records,
    };
    println!("{}", render(&doc, ReportFormat::Markdown)?);
    Ok(())
}
