//! One full ego-side fusion tick: temporal sync by query flow, rotation-aware
//! spatial sync, Hungarian matching, ego-area removal, lane concatenation,
//! and occupancy warp + max fusion.
//!
//! ```bash
//! cargo run --example fusion_pipeline
//! ```

use coopsim::fusion::match_queries;
use coopsim::harness::ExperimentConfig;
use coopsim::infra::{build_payload, estimate_query_flow, TransmitContent};
use coopsim::pipeline::{ego_sensor_template, fuse_tick, infra_sensor};
use coopsim::scenario::{
    generate_scenario, perceive, substream, ScenarioConfig, STREAM_EGO, STREAM_INFRA,
};

fn main() -> coopsim::Result<()> {
    let cfg = ExperimentConfig::default();
    let scenario = generate_scenario(&ScenarioConfig {
        seed: 5,
        ..Default::default()
    })?;
    let k = 6;
    let frame = &scenario.frames[k];

    // Infrastructure side.
    let infra = infra_sensor(&cfg);
    let mut rng = substream(5, &[STREAM_INFRA, k as u64]);
    let infra_frame = perceive(frame, &scenario.lanes, &infra, &mut rng);
    let infra_frame = estimate_query_flow(None, &infra_frame, scenario.config.dt)?;
    let payload = build_payload(
        &infra_frame,
        &infra.mount_pose,
        1,
        0.3,
        TransmitContent::default(),
    );

    // Ego side.
    let mut ego_sensor = ego_sensor_template(&cfg);
    ego_sensor.mount_pose = frame.ego_pose;
    let mut rng = substream(5, &[STREAM_EGO, k as u64]);
    let ego_frame = perceive(frame, &scenario.lanes, &ego_sensor, &mut rng);
    let ego_frame = estimate_query_flow(None, &ego_frame, scenario.config.dt)?;

    println!(
        "t={:.1}s: ego sees {} agents / {} lanes, infrastructure transmits {} agents / {} lanes",
        frame.time,
        ego_frame.agent_queries.len(),
        ego_frame.lane_queries.len(),
        payload.agent_queries.len(),
        payload.lane_queries.len()
    );

    // Peek at the match structure before fusing.
    let rel = coopsim::core::relative_pose(&frame.ego_pose, &payload.header.world_from_sensor);
    let synced = coopsim::fusion::spatial_sync_queries(&payload.agent_queries, &rel);
    let matches = match_queries(&synced, &ego_frame.agent_queries, cfg.fusion.gate_distance);
    println!(
        "matching at {:.1} m gate: {} cross-view pairs, {} infra-only, {} ego-only",
        cfg.fusion.gate_distance,
        matches.pairs.len(),
        matches.unmatched_infra.len(),
        matches.unmatched_ego.len()
    );

    let fused = fuse_tick(&ego_frame, Some(&payload), &frame.ego_pose, &cfg.fusion)?;
    println!(
        "fused scene: {} agent queries, {} lanes, {} occupied cells (theta {})",
        fused.queries.len(),
        fused.lanes.len(),
        fused.mask.cells.count_true(),
        fused.mask.threshold_used
    );

    let ego_only = fuse_tick(&ego_frame, None, &frame.ego_pose, &cfg.fusion)?;
    println!(
        "without the payload the ego would see {} agents and {} occupied cells",
        ego_only.queries.len(),
        ego_only.mask.cells.count_true()
    );
    Ok(())
}
