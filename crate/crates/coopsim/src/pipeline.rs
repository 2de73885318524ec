//! Per-seed simulation loop: oracle perception on both views, transmission
//! through the channel, ego-side fusion, planning, and metric accumulation.

use std::collections::BTreeMap;

use crate::channel::{Channel, CostReport};
use crate::core::{Grid, GridSpec, LaneClass, OccupancyMessage, Pose};
use crate::error::Result;
use crate::fusion::{
    fuse_agents, fuse_lanes, fuse_occupancy, mask_from, spatial_sync_lanes, spatial_sync_queries,
    temporal_sync_occupancy, temporal_sync_queries, warp_field, warp_occupancy, FusedScene,
    FusionConfig,
};
use crate::harness::{ExperimentConfig, Mode};
use crate::infra::{build_payload, estimate_query_flow, V2XPayload};
use crate::metrics::{
    average_precision, detection_recall, occupancy_iou_counts, planning_metrics,
    rasterize_polylines, ratio_or_one, tracking_metrics, BevBox, Detection, EvalReport,
    GroundTruthBox, PlanningSample, TrackObs, PLANNING_HORIZONS,
};
use crate::planner::plan;
use crate::scenario::{
    perceive, rasterize_agents, PerceivedFrame, Scenario, SensorSpec, WorldFrame, EGO_TRACK_BASE,
    INFRA_TRACK_BASE, STREAM_EGO, STREAM_INFRA,
};

/// Half-extent of the ego interest range for evaluation, meters.
pub const INTEREST_HALF: f64 = 50.0;

const INFRA_SENDER_ID: u32 = 1;

/// Mean transmitted cost over a run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostAggregate {
    pub feature_bytes: f64,
    pub geometry_bytes: f64,
    pub occupancy_bytes: f64,
    pub total_body_bytes: f64,
    pub bps: f64,
}

impl CostAggregate {
    pub fn zero() -> Self {
        CostAggregate {
            feature_bytes: 0.0,
            geometry_bytes: 0.0,
            occupancy_bytes: 0.0,
            total_body_bytes: 0.0,
            bps: 0.0,
        }
    }

    fn from_reports(reports: &[CostReport]) -> Self {
        if reports.is_empty() {
            return Self::zero();
        }
        let n = reports.len() as f64;
        CostAggregate {
            feature_bytes: reports.iter().map(|r| r.feature_bytes as f64).sum::<f64>() / n,
            geometry_bytes: reports.iter().map(|r| r.geometry_bytes as f64).sum::<f64>() / n,
            occupancy_bytes: reports
                .iter()
                .map(|r| r.occupancy_bytes as f64)
                .sum::<f64>()
                / n,
            total_body_bytes: reports
                .iter()
                .map(|r| r.total_body_bytes as f64)
                .sum::<f64>()
                / n,
            bps: reports.iter().map(|r| r.bps).sum::<f64>() / n,
        }
    }
}

/// The ego front camera: forward FOV only, which is exactly the blind-spot
/// structure infrastructure data is meant to fill.
pub fn ego_sensor_template(cfg: &ExperimentConfig) -> SensorSpec {
    SensorSpec {
        mount_pose: Pose::identity(),
        fov_rect: [0.0, 50.0, -25.0, 25.0],
        pos_noise_sigma: cfg.noise.pos_sigma,
        heading_noise_sigma: cfg.noise.heading_sigma,
        miss_prob: cfg.noise.miss_prob,
        false_pos_rate: cfg.noise.false_pos_rate,
        conf_base: cfg.noise.conf_base,
        conf_decay: cfg.noise.conf_decay,
        grid: GridSpec::ego_default(),
        track_id_base: EGO_TRACK_BASE,
        sees_ego: false,
        feature_dim: cfg.feature_dim,
    }
}

/// Roadside camera south of the junction looking north over it. The mount
/// sits 0.25 m east of the road axis so the infra and ego BEV lattices
/// coincide while the ego drives straight north; occupancy warps are then
/// exact cell copies rather than bilinear mixes.
pub fn infra_sensor(cfg: &ExperimentConfig) -> SensorSpec {
    SensorSpec {
        mount_pose: Pose::from_yaw(std::f64::consts::FRAC_PI_2, [0.25, -45.0, 0.0]),
        fov_rect: [0.0, 100.0, -50.0, 50.0],
        pos_noise_sigma: cfg.noise.pos_sigma,
        heading_noise_sigma: cfg.noise.heading_sigma,
        miss_prob: cfg.noise.miss_prob,
        false_pos_rate: cfg.noise.false_pos_rate,
        conf_base: cfg.noise.conf_base,
        conf_decay: cfg.noise.conf_decay,
        grid: GridSpec::infra_default(),
        track_id_base: INFRA_TRACK_BASE,
        sees_ego: true,
        feature_dim: cfg.feature_dim,
    }
}

/// One ego-side fusion tick. `payload` is the most recent delivery, if any;
/// `None` is the no-fusion path, and an empty payload reduces to it bitwise.
pub fn fuse_tick(
    ego_frame: &PerceivedFrame,
    payload: Option<&V2XPayload>,
    world_from_ego: &Pose,
    cfg: &FusionConfig,
) -> Result<FusedScene> {
    let t_v = ego_frame.timestamp;
    let ego_grid = ego_frame.occupancy.grid();

    let mut synced_queries = Vec::new();
    let mut synced_lanes = Vec::new();
    let mut infra_grids: Option<(Grid<f32>, Grid<f32>)> = None;
    if let Some(p) = payload {
        let rel = crate::core::relative_pose(world_from_ego, &p.header.world_from_sensor);
        let queries = if cfg.flow_compensation {
            temporal_sync_queries(&p.agent_queries, t_v)?
        } else {
            // Uncompensated variant: data is used as-is at its send time.
            let mut qs = p.agent_queries.clone();
            for q in &mut qs {
                q.timestamp = t_v;
            }
            qs
        };
        synced_queries = spatial_sync_queries(&queries, &rel);
        synced_lanes = spatial_sync_lanes(&p.lane_queries, &rel);
        if let Some(occ) = &p.occupancy {
            let msg = occ.to_message();
            let p0 = if cfg.flow_compensation {
                temporal_sync_occupancy(&msg, t_v)
            } else {
                msg.p0.clone()
            };
            let p0_warped = warp_occupancy(&p0, &rel, ego_grid);
            let p1_warped = warp_field(&msg.p1, &rel, ego_grid);
            infra_grids = Some((p0_warped, p1_warped));
        }
    }

    let fused_queries = fuse_agents(&synced_queries, &ego_frame.agent_queries, cfg);
    let (fused_p0, fused_p1) = match infra_grids {
        None => (
            ego_frame.occupancy.p0.clone(),
            ego_frame.occupancy.p1.clone(),
        ),
        Some((p0w, p1w)) => {
            let (p0, _) = fuse_occupancy(&ego_frame.occupancy.p0, &p0w, cfg.occ_threshold)?;
            // The flow follows whichever side owns the max-fused probability.
            let mut p1 = ego_frame.occupancy.p1.clone();
            for i in 0..p1.data.len() {
                if p0w.data[i] > ego_frame.occupancy.p0.data[i] {
                    p1.data[i] = p1w.data[i];
                }
            }
            (p0, p1)
        }
    };
    let (queries, grid) = crate::fusion::ego_filter(fused_queries, fused_p0, cfg);
    // The designated-unoccupied region must stay unoccupied under flow
    // extrapolation too. The ego's own motion leaves a positive p1 smear one
    // blur ring (plus warp spread) beyond the cleared rectangle, so the flow
    // is cleared with that extra sleeve.
    let mut fused_p1 = fused_p1;
    let sleeve = 2.5 * grid.spec.resolution;
    let hx = cfg.ego_rect[0] / 2.0 + cfg.ego_margin + sleeve;
    let hy = cfg.ego_rect[1] / 2.0 + cfg.ego_margin + sleeve;
    for (row, col) in
        crate::core::cells_in_oriented_rect(&grid.spec, [0.0, 0.0], 0.0, 2.0 * hx, 2.0 * hy)
    {
        fused_p1.set(row, col, 0.0);
    }
    let mask = mask_from(&grid, cfg.occ_threshold);
    let lanes = fuse_lanes(&synced_lanes, &ego_frame.lane_queries);
    Ok(FusedScene {
        queries,
        lanes,
        occupancy: OccupancyMessage {
            p0: grid,
            p1: fused_p1,
            timestamp: t_v,
        },
        mask,
    })
}

fn resample_drivable(world: &Grid<bool>, world_from_ego: &Pose, dst: GridSpec) -> Grid<bool> {
    let mut out = Grid::filled(dst, false);
    for row in 0..dst.height {
        for col in 0..dst.width {
            let c = dst.cell_center(row, col);
            let w = world_from_ego.transform_point([c[0], c[1], 0.0]);
            out.set(row, col, world.at_world([w[0], w[1]]).unwrap_or(false));
        }
    }
    out
}

struct MetricAccumulator {
    detections: Vec<Detection>,
    ground_truth: Vec<GroundTruthBox>,
    track_frames: Vec<Vec<TrackObs>>,
    gt_track_frames: Vec<Vec<TrackObs>>,
    lane_counts: BTreeMap<LaneClass, (u64, u64)>,
    occ_n: (u64, u64),
    occ_f: (u64, u64),
    planning: Vec<PlanningSample>,
    costs: Vec<CostReport>,
}

impl MetricAccumulator {
    fn new() -> Self {
        MetricAccumulator {
            detections: Vec::new(),
            ground_truth: Vec::new(),
            track_frames: Vec::new(),
            gt_track_frames: Vec::new(),
            lane_counts: BTreeMap::new(),
            occ_n: (0, 0),
            occ_f: (0, 0),
            planning: Vec::new(),
            costs: Vec::new(),
        }
    }
}

/// Runs one seed of an experiment over a ready scenario and returns the
/// evaluation report plus mean transmission cost.
pub fn run_seed(
    scenario: &Scenario,
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<(EvalReport, CostAggregate)> {
    let dt = scenario.config.dt;
    let ego_template = ego_sensor_template(cfg);
    let infra = infra_sensor(cfg);
    let ego_grid = ego_template.grid;

    let mut channel = if cfg.mode.transmits() {
        let mut ch_cfg = cfg.channel.clone();
        ch_cfg.seed = crate::scenario::mix_seed(cfg.channel.seed, run_seed);
        Some(Channel::new(ch_cfg, cfg.feature_dim))
    } else {
        None
    };

    let mut fusion_cfg = cfg.fusion;
    if cfg.mode == Mode::LateFusion {
        // Boxes only: no flow to extrapolate with.
        fusion_cfg.flow_compensation = false;
    }

    let mut prev_ego: Option<PerceivedFrame> = None;
    let mut prev_infra: Option<PerceivedFrame> = None;
    let mut acc = MetricAccumulator::new();

    for (k, frame) in scenario.frames.iter().enumerate() {
        let t = frame.time;

        if let Some(ch) = channel.as_mut() {
            let mut rng = crate::scenario::substream(run_seed, &[STREAM_INFRA, k as u64]);
            let raw = perceive(frame, &scenario.lanes, &infra, &mut rng);
            let with_flows = estimate_query_flow(prev_infra.as_ref(), &raw, dt)?;
            let mut content = cfg.transmit.content;
            if cfg.mode == Mode::LateFusion {
                content.lanes = false;
                content.occupancy = false;
            }
            let mut payload = build_payload(
                &with_flows,
                &infra.mount_pose,
                INFRA_SENDER_ID,
                cfg.transmit.conf_threshold,
                content,
            );
            if cfg.mode == Mode::LateFusion {
                for q in &mut payload.agent_queries {
                    q.feature = vec![0.0; cfg.feature_dim];
                    q.flow_feature = vec![0.0; cfg.feature_dim];
                    q.flow_ref = [0.0, 0.0];
                }
            }
            let agents_sent_bound = payload.agent_queries.len();
            let report = ch.submit(&payload, t);
            acc.costs.push(mode_cost(cfg, report, agents_sent_bound));
            prev_infra = Some(with_flows);
        }

        let mut ego_sensor = ego_template.clone();
        ego_sensor.mount_pose = frame.ego_pose;
        let mut rng = crate::scenario::substream(run_seed, &[STREAM_EGO, k as u64]);
        let raw = perceive(frame, &scenario.lanes, &ego_sensor, &mut rng);
        let ego_frame = estimate_query_flow(prev_ego.as_ref(), &raw, dt)?;

        let delivered = channel.as_mut().map(|ch| ch.poll(t)).unwrap_or_default();
        let payload = delivered.last();
        let fused = fuse_tick(&ego_frame, payload, &frame.ego_pose, &fusion_cfg)?;

        let drivable_ego = resample_drivable(&scenario.drivable, &frame.ego_pose, ego_grid);
        let traj = plan(
            &fused,
            frame.ego.speed,
            scenario.config.ego_command,
            &drivable_ego,
            &cfg.planner,
        );

        accumulate_frame(&mut acc, scenario, k, frame, &fused, &traj, cfg)?;
        prev_ego = Some(ego_frame);
    }

    let cost = CostAggregate::from_reports(&acc.costs);
    Ok((finish(acc, cost.bps), cost))
}

fn mode_cost(cfg: &ExperimentConfig, transmitted: CostReport, agents_sent: usize) -> CostReport {
    match cfg.mode {
        Mode::NoFusion => CostReport::zero(),
        Mode::Univ2x => transmitted,
        Mode::LateFusion => {
            // Plain detection boxes: 32 bytes each plus a count word.
            let total = 32 * agents_sent as u64 + 4;
            CostReport {
                feature_bytes: 0,
                geometry_bytes: total,
                occupancy_bytes: 0,
                total_body_bytes: total,
                bps: total as f64 * cfg.channel.frequency_hz,
            }
        }
        Mode::DenseBev => {
            // Cost-only baseline: the dense BEV feature tensor.
            let total = crate::channel::dense_feature_cost(&[
                GridSpec::ego_default().width,
                GridSpec::ego_default().height,
                cfg.feature_dim,
            ]);
            CostReport {
                feature_bytes: total,
                geometry_bytes: 0,
                occupancy_bytes: 0,
                total_body_bytes: total,
                bps: total as f64 * cfg.channel.frequency_hz,
            }
        }
    }
}

fn accumulate_frame(
    acc: &mut MetricAccumulator,
    scenario: &Scenario,
    k: usize,
    frame: &WorldFrame,
    fused: &FusedScene,
    traj: &crate::planner::Trajectory,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let to_ego = frame.ego_pose.invert();
    let ego_yaw = frame.ego_pose.yaw();

    // Ground truth inside the interest range, in the ego frame.
    let mut gt_tracks = Vec::new();
    for agent in &frame.agents {
        let p = to_ego.transform_point([agent.position[0], agent.position[1], 0.0]);
        if p[0].abs() > INTEREST_HALF || p[1].abs() > INTEREST_HALF {
            continue;
        }
        acc.ground_truth.push(GroundTruthBox {
            frame: k,
            class: agent.class,
            bev: BevBox {
                center: [p[0], p[1]],
                length: agent.box_size[0],
                width: agent.box_size[1],
                heading: agent.heading - ego_yaw,
            },
        });
        gt_tracks.push(TrackObs {
            id: agent.id,
            pos: [p[0], p[1]],
        });
    }
    let mut tracks = Vec::new();
    for q in &fused.queries {
        acc.detections.push(Detection {
            frame: k,
            class: q.class,
            bev: BevBox {
                center: [q.ref_point[0], q.ref_point[1]],
                length: q.box_size[0],
                width: q.box_size[1],
                heading: q.heading,
            },
            confidence: q.confidence,
        });
        tracks.push(TrackObs {
            id: q.track_id,
            pos: [q.ref_point[0], q.ref_point[1]],
        });
    }
    acc.track_frames.push(tracks);
    acc.gt_track_frames.push(gt_tracks);

    // Lane IoU, pooled over frames per class.
    let ego_grid = fused.occupancy.grid();
    for class in LaneClass::ALL {
        let pred: Vec<Vec<[f64; 2]>> = fused
            .lanes
            .iter()
            .filter(|l| l.class == class)
            .map(|l| l.points.clone())
            .collect();
        let gt: Vec<Vec<[f64; 2]>> = scenario
            .lanes
            .iter()
            .filter(|l| l.class == class)
            .map(|l| {
                l.points
                    .iter()
                    .map(|p| {
                        let q = to_ego.transform_point([p[0], p[1], 0.0]);
                        [q[0], q[1]]
                    })
                    .collect()
            })
            .collect();
        let p = rasterize_polylines(&pred, ego_grid);
        let g = rasterize_polylines(&gt, ego_grid);
        let entry = acc.lane_counts.entry(class).or_insert((0, 0));
        for i in 0..p.data.len() {
            if p.data[i] && g.data[i] {
                entry.0 += 1;
            }
            if p.data[i] || g.data[i] {
                entry.1 += 1;
            }
        }
    }

    // Occupancy IoU in the near and far windows.
    let gt_occ = rasterize_agents(frame, ego_grid, &frame.ego_pose);
    let (i_n, u_n) = occupancy_iou_counts(&fused.mask.cells, &gt_occ, 15.0);
    let (i_f, u_f) = occupancy_iou_counts(&fused.mask.cells, &gt_occ, 25.0);
    acc.occ_n.0 += i_n;
    acc.occ_n.1 += u_n;
    acc.occ_f.0 += i_f;
    acc.occ_f.1 += u_f;

    // Planning metrics for frames whose full horizon stays inside the log.
    let dt = scenario.config.dt;
    let horizon_steps: Vec<usize> = PLANNING_HORIZONS
        .iter()
        .map(|h| (h / dt).round() as usize)
        .collect();
    let aligned = PLANNING_HORIZONS
        .iter()
        .zip(horizon_steps.iter())
        .all(|(h, s)| ((*s as f64) * dt - h).abs() < 1e-9);
    let last_needed = k + horizon_steps.last().copied().unwrap_or(0);
    if aligned && last_needed < scenario.frames.len() {
        let world_spec = scenario.drivable.spec;
        let mut gt_future = [[0.0; 2]; 3];
        let mut masks: Vec<Grid<bool>> = Vec::with_capacity(3);
        for (i, steps) in horizon_steps.iter().enumerate() {
            let fut = &scenario.frames[k + steps];
            gt_future[i] = fut.ego.position;
            masks.push(rasterize_agents(fut, world_spec, &Pose::identity()));
        }
        let masks: [Grid<bool>; 3] = [masks[0].clone(), masks[1].clone(), masks[2].clone()];
        let sample = planning_metrics(
            traj,
            &frame.ego_pose,
            &gt_future,
            &masks,
            &scenario.drivable,
            cfg.planner.ego_box,
        )?;
        acc.planning.push(sample);
    }
    Ok(())
}

fn finish(acc: MetricAccumulator, avg_bps: f64) -> EvalReport {
    let mut ap_per_class = BTreeMap::new();
    for class in crate::core::AgentClass::ALL {
        let gts: Vec<GroundTruthBox> = acc
            .ground_truth
            .iter()
            .filter(|g| g.class == class)
            .copied()
            .collect();
        if gts.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = acc
            .detections
            .iter()
            .filter(|d| d.class == class)
            .copied()
            .collect();
        ap_per_class.insert(
            class.name().to_string(),
            average_precision(&dets, &gts, 0.5),
        );
    }
    let det_recall = detection_recall(&acc.detections, &acc.ground_truth, 0.5);
    let (mota, idsw) = tracking_metrics(&acc.track_frames, &acc.gt_track_frames, 2.0);

    let lane_ratio = |class: LaneClass| -> f64 {
        match acc.lane_counts.get(&class) {
            Some((i, u)) => ratio_or_one(*i, *u),
            None => 1.0,
        }
    };

    let n_plan = acc.planning.len().max(1) as f64;
    let mut l2_at = BTreeMap::new();
    let mut collision_rate_at = BTreeMap::new();
    let mut offroad_rate_at = BTreeMap::new();
    let mut l2_sum_all = 0.0;
    let mut col_sum_all = 0.0;
    let mut off_sum_all = 0.0;
    for (i, h) in PLANNING_HORIZONS.iter().enumerate() {
        let key = format!("{h}");
        let l2: f64 = acc.planning.iter().map(|s| s.l2[i]).sum::<f64>() / n_plan;
        let col: f64 = acc.planning.iter().filter(|s| s.collision[i]).count() as f64 / n_plan;
        let off: f64 = acc.planning.iter().filter(|s| s.offroad[i]).count() as f64 / n_plan;
        l2_at.insert(key.clone(), l2);
        collision_rate_at.insert(key.clone(), col);
        offroad_rate_at.insert(key, off);
        l2_sum_all += l2;
        col_sum_all += col;
        off_sum_all += off;
    }
    let horizons = PLANNING_HORIZONS.len() as f64;

    EvalReport {
        ap_per_class,
        det_recall,
        mota,
        id_switches: idsw as f64,
        iou_lane: lane_ratio(LaneClass::Lane),
        iou_crosswalk: lane_ratio(LaneClass::Crosswalk),
        iou_n: ratio_or_one(acc.occ_n.0, acc.occ_n.1),
        iou_f: ratio_or_one(acc.occ_f.0, acc.occ_f.1),
        l2_at,
        collision_rate_at,
        offroad_rate_at,
        l2_avg: l2_sum_all / horizons,
        collision_rate_avg: col_sum_all / horizons,
        offroad_rate_avg: off_sum_all / horizons,
        avg_bps,
    }
}
