//! The three reliability ablations: data corruption, communication
//! bandwidth, and latency with/without flow compensation.
//!
//! ```bash
//! cargo run --release --example ablation_sweeps
//! ```

use coopsim::harness::{sweep, ExperimentConfig, NoiseConfig, SweepAxis};

fn main() -> coopsim::Result<()> {
    let base = ExperimentConfig {
        seeds: (0..10).collect(),
        ..Default::default()
    };

    eprintln!("corruption sweep (agent queries only)...");
    let records = sweep(
        SweepAxis::Corruption,
        &[0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
        &base,
    )?;
    println!("drop fraction | recall | collision rate (avg %)");
    for r in &records {
        println!(
            "{:>13} | {:.3}  | {:.2}",
            r.axis_value.unwrap(),
            r.mean.det_recall,
            100.0 * r.mean.collision_rate_avg
        );
    }

    eprintln!("bandwidth sweep...");
    let records = sweep(SweepAxis::Bandwidth, &[0.0, 0.3, 0.5, 0.7, 1.0], &base)?;
    println!("\nbandwidth Mb/s | recall | IoU-f (%) | BPS");
    for r in &records {
        println!(
            "{:>14} | {:.3}  | {:>5.1}     | {:.3e}",
            r.axis_value.unwrap(),
            r.mean.det_recall,
            100.0 * r.mean.iou_f,
            r.mean.avg_bps
        );
    }

    eprintln!("latency sweep (noiseless, constant-velocity traffic)...");
    let mut lat = base.clone();
    lat.noise = NoiseConfig::noiseless();
    let records = sweep(SweepAxis::Latency, &[0.0, 0.5], &lat)?;
    println!("\nlatency s / variant        | recall");
    for r in &records {
        println!("{:>26} | {:.3}", r.label, r.mean.det_recall);
    }
    Ok(())
}
