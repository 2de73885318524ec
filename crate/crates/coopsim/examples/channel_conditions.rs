//! The communication fault model: delivery latency, bandwidth budgets with
//! score-based retention (dense occupancy degrading to a sparse cell list),
//! and seeded corruption.
//!
//! ```bash
//! cargo run --example channel_conditions
//! ```

use coopsim::channel::{cost, Channel, ChannelConfig};
use coopsim::harness::ExperimentConfig;
use coopsim::infra::{build_payload, estimate_query_flow, OccupancyTransport, TransmitContent};
use coopsim::pipeline::infra_sensor;
use coopsim::scenario::{generate_scenario, perceive, substream, ScenarioConfig, STREAM_INFRA};

fn main() -> coopsim::Result<()> {
    let cfg = ExperimentConfig::default();
    let scenario = generate_scenario(&ScenarioConfig {
        seed: 3,
        ..Default::default()
    })?;
    let sensor = infra_sensor(&cfg);
    let mut rng = substream(3, &[STREAM_INFRA, 4]);
    let frame = perceive(&scenario.frames[4], &scenario.lanes, &sensor, &mut rng);
    let frame = estimate_query_flow(None, &frame, 0.5)?;
    let payload = build_payload(
        &frame,
        &sensor.mount_pose,
        1,
        0.3,
        TransmitContent::default(),
    );
    let full = cost(&payload, 2.0);
    println!(
        "full payload: {} B ({} agents)",
        full.total_body_bytes,
        payload.agent_queries.len()
    );

    // Latency: submitted at t=2.0, nothing arrives until t >= 2.5.
    let mut ch = Channel::new(
        ChannelConfig {
            latency: 0.5,
            ..Default::default()
        },
        cfg.feature_dim,
    );
    ch.submit(&payload, 2.0);
    println!(
        "latency 0.5s: poll(2.4) -> {} payloads, poll(2.5) -> {}",
        { ch.poll(2.4).len() },
        ch.poll(2.5).len()
    );

    // Bandwidth: shrink the budget and watch retention degrade.
    for budget in [u64::MAX, 350_000, 62_500, 25_000, 2_500, 0] {
        let fitted = coopsim::channel::fit_to_budget(&payload, budget);
        let c = cost(&fitted, 2.0);
        let occ = match &fitted.occupancy {
            None => "none".to_string(),
            Some(OccupancyTransport::Dense(_)) => "dense".to_string(),
            Some(OccupancyTransport::Sparse { cells, .. }) => {
                format!("sparse({} cells)", cells.len())
            }
        };
        println!(
            "budget {budget:>12} B -> {} agents, {} lanes, occupancy {occ}, cost {} B",
            fitted.agent_queries.len(),
            fitted.lane_queries.len(),
            c.total_body_bytes
        );
    }

    // Corruption: seeded, nested subsets across fractions.
    for fraction in [0.0, 0.3, 0.7, 1.0] {
        let mut rng = substream(99, &[0]);
        let corrupted = coopsim::channel::corrupt(&payload, fraction, &mut rng);
        println!(
            "drop {fraction:>3}: {} of {} agent queries survive",
            corrupted.agent_queries.len(),
            payload.agent_queries.len()
        );
    }
    Ok(())
}
