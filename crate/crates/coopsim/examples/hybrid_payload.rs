//! Build the infrastructure's sparse-dense hybrid payload, push it through
//! the bit-exact wire codec, and compare its transmission cost against a
//! dense BEV feature map.
//!
//! ```bash
//! cargo run --example hybrid_payload
//! ```

use coopsim::channel::{cost, dense_feature_cost, WireCodec};
use coopsim::harness::ExperimentConfig;
use coopsim::infra::{build_payload, estimate_query_flow, TransmitContent};
use coopsim::pipeline::infra_sensor;
use coopsim::scenario::{generate_scenario, perceive, substream, ScenarioConfig, STREAM_INFRA};

fn main() -> coopsim::Result<()> {
    let cfg = ExperimentConfig::default();
    let scenario = generate_scenario(&ScenarioConfig {
        seed: 7,
        ..Default::default()
    })?;
    let sensor = infra_sensor(&cfg);
    let dt = scenario.config.dt;

    // Two frames give finite-difference flows for latency compensation.
    let mut rng0 = substream(7, &[STREAM_INFRA, 0]);
    let mut rng1 = substream(7, &[STREAM_INFRA, 1]);
    let f0 = perceive(&scenario.frames[0], &scenario.lanes, &sensor, &mut rng0);
    let f1 = perceive(&scenario.frames[1], &scenario.lanes, &sensor, &mut rng1);
    let with_flows = estimate_query_flow(Some(&f0), &f1, dt)?;

    let payload = build_payload(
        &with_flows,
        &sensor.mount_pose,
        1,
        0.3,
        TransmitContent::default(),
    );
    println!(
        "payload @ t={:.1}s: {} agent queries, {} lane queries, occupancy {}",
        payload.header.timestamp,
        payload.agent_queries.len(),
        payload.lane_queries.len(),
        if payload.occupancy.is_some() {
            "dense (p0, p1)"
        } else {
            "absent"
        },
    );

    // Geometry travels as f32; decoding and re-encoding reproduces the byte
    // stream exactly.
    let codec = WireCodec::new(cfg.feature_dim);
    let bytes = codec.encode(&payload);
    let reencoded = codec.encode(&codec.decode(&bytes)?);
    println!(
        "wire: {} bytes, re-encode of decode is byte-identical: {}",
        bytes.len(),
        reencoded == bytes
    );

    let report = cost(&payload, 2.0);
    println!(
        "cost: features {} B + geometry {} B + occupancy {} B = {} B/payload -> {:.3e} B/s at 2 Hz",
        report.feature_bytes,
        report.geometry_bytes,
        report.occupancy_bytes,
        report.total_body_bytes,
        report.bps
    );

    let dense_bps = dense_feature_cost(&[200, 200, 256]) as f64 * 2.0;
    println!(
        "dense (200,200,256) BEV feature map: {dense_bps:.3e} B/s -> hybrid is {:.0}x lighter",
        dense_bps / report.bps
    );
    Ok(())
}
