//! Ego-side cross-view fusion: temporal synchronization by linear flow
//! extrapolation, rotation-aware spatial synchronization, Hungarian matching
//! with confidence-weighted query fusion, ego-area removal, lane
//! concatenation, and occupancy warp + max fusion.

use serde::{Deserialize, Serialize};

use crate::core::{
    wrap_angle, AgentQuery, Grid, GridSpec, LaneQuery, OccupancyMessage, OccupiedMask, Pose,
};
use crate::error::{Error, Result};
use crate::scenario::rotate_feature_pairs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Hungarian gating distance in meters; pairs farther apart are forbidden.
    pub gate_distance: f64,
    /// Fused queries below this confidence are discarded.
    pub conf_keep_threshold: f64,
    /// Occupancy probability at or above which a cell is marked occupied.
    pub occ_threshold: f32,
    /// Ego footprint (length, width) in meters.
    pub ego_rect: [f64; 2],
    /// Margin added around the ego rectangle, meters.
    pub ego_margin: f64,
    /// Confidence multiplier for unmatched infrastructure queries.
    pub unmatched_conf_decay: f64,
    /// When false, latency compensation by flow extrapolation is skipped;
    /// infrastructure data is used as-is at its send time.
    pub flow_compensation: bool,
    /// Offset applied to unmatched infrastructure track ids so they land in
    /// a fresh ego-side namespace.
    pub infra_id_offset: i32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            gate_distance: 2.0,
            conf_keep_threshold: 0.3,
            occ_threshold: 0.8,
            ego_rect: [4.6, 1.8],
            ego_margin: 0.5,
            unmatched_conf_decay: 0.8,
            flow_compensation: true,
            infra_id_offset: 1_000_000,
        }
    }
}

/// Outcome of cross-view matching over two query lists. Indices partition
/// both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_infra: Vec<usize>,
    pub unmatched_ego: Vec<usize>,
}

/// The fused ego-frame scene handed to the planner and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScene {
    pub queries: Vec<AgentQuery>,
    pub lanes: Vec<LaneQuery>,
    pub occupancy: OccupancyMessage,
    pub mask: OccupiedMask,
}

/// Advances queries to `t_v` by their flows: `ref += dt*flow_ref`,
/// `feature += dt*flow_feature`.
pub fn temporal_sync_queries(queries: &[AgentQuery], t_v: f64) -> Result<Vec<AgentQuery>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let dt = t_v - q.timestamp;
        if dt < -1e-12 {
            return Err(Error::TimeOrder(format!(
                "cannot sync query at {} back to {}",
                q.timestamp, t_v
            )));
        }
        let mut s = q.clone();
        s.ref_point[0] += dt * q.flow_ref[0];
        s.ref_point[1] += dt * q.flow_ref[1];
        s.feature = q
            .feature
            .iter()
            .zip(q.flow_feature.iter())
            .map(|(f, df)| f + dt * df)
            .collect();
        s.timestamp = t_v;
        out.push(s);
    }
    Ok(out)
}

/// Linear occupancy extrapolation: `clamp(p0 + (t - t0) * p1, 0, 1)`.
pub fn temporal_sync_occupancy(msg: &OccupancyMessage, t: f64) -> Grid<f32> {
    let dt = t - msg.timestamp;
    let mut out = Grid::filled(msg.grid(), 0.0f32);
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (msg.p0.data[i] as f64 + dt * msg.p1.data[i] as f64).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Rotation-aware frame change: reference points are transformed, heading,
/// velocity and flow rotate by the relative yaw, and feature pairs rotate
/// in-plane by the same yaw (the orientation content implicit in a query's
/// feature).
pub fn spatial_sync_queries(queries: &[AgentQuery], ego_from_infra: &Pose) -> Vec<AgentQuery> {
    let yaw = ego_from_infra.yaw();
    let (s, c) = yaw.sin_cos();
    let rot2 = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    queries
        .iter()
        .map(|q| {
            let mut out = q.clone();
            out.ref_point = ego_from_infra.transform_point(q.ref_point);
            out.heading = wrap_angle(q.heading + yaw);
            out.velocity = rot2(q.velocity);
            out.flow_ref = rot2(q.flow_ref);
            out.feature = rotate_feature_pairs(&q.feature, yaw);
            out.flow_feature = rotate_feature_pairs(&q.flow_feature, yaw);
            out
        })
        .collect()
}

/// Lane queries change frames the same way: polyline points transform,
/// feature pairs rotate.
pub fn spatial_sync_lanes(lanes: &[LaneQuery], ego_from_infra: &Pose) -> Vec<LaneQuery> {
    let yaw = ego_from_infra.yaw();
    lanes
        .iter()
        .map(|l| {
            let mut out = l.clone();
            out.points = l
                .points
                .iter()
                .map(|p| {
                    let q = ego_from_infra.transform_point([p[0], p[1], 0.0]);
                    [q[0], q[1]]
                })
                .collect();
            out.feature = rotate_feature_pairs(&l.feature, yaw);
            out
        })
        .collect()
}

const FORBIDDEN_SENTINEL: f64 = 1e12;

/// Minimum-total-cost assignment over an n x m matrix. `f64::INFINITY`
/// entries mark forbidden pairs. Returns up to `min(n, m)` (row, col) pairs;
/// assignments that would land on forbidden or padding entries are omitted.
/// Among equal-cost optima the result is normalized toward the
/// lexicographically smallest pair list by 2-swaps.
#[allow(clippy::needless_range_loop)]
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let k = n.max(m);
    let entry = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            let v = cost[i][j];
            if v.is_finite() {
                v
            } else {
                FORBIDDEN_SENTINEL
            }
        } else {
            FORBIDDEN_SENTINEL
        }
    };

    // Shortest augmenting path with potentials (1-indexed bookkeeping).
    let mut u = vec![0.0f64; k + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut assigned_row = vec![0usize; k + 1]; // col -> row, 0 = free
    let mut way = vec![0usize; k + 1];
    for row in 1..=k {
        assigned_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if !used[j] {
                    let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for j in 1..=k {
        let i = assigned_row[j];
        if i == 0 {
            continue;
        }
        let (row, col) = (i - 1, j - 1);
        if row < n && col < m && cost[row][col].is_finite() {
            pairs.push((row, col));
        }
    }
    pairs.sort_unstable();

    // Normalize equal-cost ties toward the lexicographically smallest list.
    let mut changed = true;
    while changed {
        changed = false;
        for a in 0..pairs.len() {
            for b in a + 1..pairs.len() {
                let (ra, ca) = pairs[a];
                let (rb, cb) = pairs[b];
                if cb < ca
                    && cost[ra][cb].is_finite()
                    && cost[rb][ca].is_finite()
                    && cost[ra][cb] + cost[rb][ca] == cost[ra][ca] + cost[rb][cb]
                {
                    pairs[a] = (ra, cb);
                    pairs[b] = (rb, ca);
                    changed = true;
                }
            }
        }
    }
    pairs
}

/// Gated cross-view matching on xy reference-point distance. Gating is
/// expressed as forbidden entries so it interacts correctly with global
/// optimality.
pub fn match_queries(infra: &[AgentQuery], ego: &[AgentQuery], gate: f64) -> MatchResult {
    let cost: Vec<Vec<f64>> = infra
        .iter()
        .map(|qi| {
            ego.iter()
                .map(|qe| {
                    let d = (qi.ref_point[0] - qe.ref_point[0])
                        .hypot(qi.ref_point[1] - qe.ref_point[1]);
                    if d <= gate {
                        d
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect();
    let pairs = hungarian(&cost);
    let mut infra_used = vec![false; infra.len()];
    let mut ego_used = vec![false; ego.len()];
    for &(i, j) in &pairs {
        infra_used[i] = true;
        ego_used[j] = true;
    }
    MatchResult {
        pairs,
        unmatched_infra: (0..infra.len()).filter(|&i| !infra_used[i]).collect(),
        unmatched_ego: (0..ego.len()).filter(|&j| !ego_used[j]).collect(),
    }
}

/// Confidence-weighted merge of one matched pair. The ego side keeps the
/// track id for continuity; confidence takes the max.
pub fn fuse_matched(infra_q: &AgentQuery, ego_q: &AgentQuery, _cfg: &FusionConfig) -> AgentQuery {
    let sum = infra_q.confidence + ego_q.confidence;
    let wi = if sum > 0.0 {
        infra_q.confidence / sum
    } else {
        0.5
    };
    let we = 1.0 - wi;
    let lerp = |a: f64, b: f64| wi * a + we * b;
    let heading = (wi * infra_q.heading.sin() + we * ego_q.heading.sin())
        .atan2(wi * infra_q.heading.cos() + we * ego_q.heading.cos());
    AgentQuery {
        feature: infra_q
            .feature
            .iter()
            .zip(ego_q.feature.iter())
            .map(|(a, b)| lerp(*a, *b))
            .collect(),
        ref_point: [
            lerp(infra_q.ref_point[0], ego_q.ref_point[0]),
            lerp(infra_q.ref_point[1], ego_q.ref_point[1]),
            lerp(infra_q.ref_point[2], ego_q.ref_point[2]),
        ],
        heading,
        velocity: [
            lerp(infra_q.velocity[0], ego_q.velocity[0]),
            lerp(infra_q.velocity[1], ego_q.velocity[1]),
        ],
        flow_ref: [
            lerp(infra_q.flow_ref[0], ego_q.flow_ref[0]),
            lerp(infra_q.flow_ref[1], ego_q.flow_ref[1]),
        ],
        flow_feature: infra_q
            .flow_feature
            .iter()
            .zip(ego_q.flow_feature.iter())
            .map(|(a, b)| lerp(*a, *b))
            .collect(),
        track_id: ego_q.track_id,
        confidence: infra_q.confidence.max(ego_q.confidence),
        box_size: [
            lerp(infra_q.box_size[0], ego_q.box_size[0]),
            lerp(infra_q.box_size[1], ego_q.box_size[1]),
            lerp(infra_q.box_size[2], ego_q.box_size[2]),
        ],
        class: if infra_q.confidence > ego_q.confidence {
            infra_q.class
        } else {
            ego_q.class
        },
        timestamp: ego_q.timestamp,
    }
}

fn remap_infra_id(id: i32, offset: i32) -> i32 {
    if id >= 0 {
        id.saturating_add(offset)
    } else {
        id.saturating_sub(offset)
    }
}

/// Full agent fusion over spatially and temporally synchronized inputs:
/// matched pairs are fused, unmatched ego queries pass through, unmatched
/// infrastructure queries are appended with fresh ego-namespace ids and
/// decayed confidence, and the result is confidence-filtered. Output order:
/// ego track id ascending, then appended infrastructure in input order.
pub fn fuse_agents(
    synced_infra: &[AgentQuery],
    ego_queries: &[AgentQuery],
    cfg: &FusionConfig,
) -> Vec<AgentQuery> {
    let matches = match_queries(synced_infra, ego_queries, cfg.gate_distance);
    let mut ego_out: Vec<AgentQuery> = Vec::with_capacity(ego_queries.len());
    let mut matched_ego: Vec<Option<usize>> = vec![None; ego_queries.len()];
    for &(i, j) in &matches.pairs {
        matched_ego[j] = Some(i);
    }
    for (j, q) in ego_queries.iter().enumerate() {
        match matched_ego[j] {
            Some(i) => ego_out.push(fuse_matched(&synced_infra[i], q, cfg)),
            None => ego_out.push(q.clone()),
        }
    }
    ego_out.sort_by_key(|q| q.track_id);

    for &i in &matches.unmatched_infra {
        let mut q = synced_infra[i].clone();
        q.track_id = remap_infra_id(q.track_id, cfg.infra_id_offset);
        q.confidence *= cfg.unmatched_conf_decay;
        ego_out.push(q);
    }
    ego_out.retain(|q| q.confidence >= cfg.conf_keep_threshold);
    ego_out
}

/// Removes self-detections: queries inside the margin-expanded ego rectangle
/// are dropped and occupancy cells with centers inside are cleared. Inputs
/// are in the ego frame (ego at the origin, heading 0).
pub fn ego_filter(
    queries: Vec<AgentQuery>,
    mut occupancy: Grid<f32>,
    cfg: &FusionConfig,
) -> (Vec<AgentQuery>, Grid<f32>) {
    let hx = cfg.ego_rect[0] / 2.0 + cfg.ego_margin;
    let hy = cfg.ego_rect[1] / 2.0 + cfg.ego_margin;
    let queries = queries
        .into_iter()
        .filter(|q| !(q.ref_point[0].abs() <= hx && q.ref_point[1].abs() <= hy))
        .collect();
    let spec = occupancy.spec;
    for (row, col) in
        crate::core::cells_in_oriented_rect(&spec, [0.0, 0.0], 0.0, 2.0 * hx, 2.0 * hy)
    {
        occupancy.set(row, col, 0.0);
    }
    (queries, occupancy)
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - cx).hypot(p[1] - cy)
}

fn mean_distance_to_polyline(points: &[[f64; 2]], polyline: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for p in points {
        let mut best = f64::INFINITY;
        if polyline.len() == 1 {
            best = (p[0] - polyline[0][0]).hypot(p[1] - polyline[0][1]);
        }
        for w in polyline.windows(2) {
            best = best.min(point_segment_distance(*p, w[0], w[1]));
        }
        total += best;
    }
    total / points.len() as f64
}

const LANE_DEDUP_DISTANCE: f64 = 0.5;

/// Lane fusion is concatenation, ego lanes first; an infrastructure polyline
/// whose mean distance to some same-class ego polyline is below 0.5 m is a
/// duplicate and dropped.
pub fn fuse_lanes(synced_infra_lanes: &[LaneQuery], ego_lanes: &[LaneQuery]) -> Vec<LaneQuery> {
    let mut out: Vec<LaneQuery> = ego_lanes.to_vec();
    for lane in synced_infra_lanes {
        let duplicate = ego_lanes.iter().any(|e| {
            e.class == lane.class
                && mean_distance_to_polyline(&lane.points, &e.points) < LANE_DEDUP_DISTANCE
        });
        if !duplicate {
            out.push(lane.clone());
        }
    }
    out
}

fn bilinear_sample(src: &Grid<f32>, xy: [f64; 2]) -> f64 {
    let spec = src.spec;
    let u = (xy[0] - spec.x_min) / spec.resolution - 0.5;
    let v = (xy[1] - spec.y_min) / spec.resolution - 0.5;
    let c0 = u.floor();
    let r0 = v.floor();
    let fx = u - c0;
    let fy = v - r0;
    let fetch = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 {
            return 0.0;
        }
        let (r, c) = (r as usize, c as usize);
        if r >= spec.height || c >= spec.width {
            return 0.0;
        }
        src.get(r, c) as f64
    };
    let v00 = fetch(r0, c0);
    let v01 = fetch(r0, c0 + 1.0);
    let v10 = fetch(r0 + 1.0, c0);
    let v11 = fetch(r0 + 1.0, c0 + 1.0);
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Resamples a probability grid into the destination frame/spec: each
/// destination cell center is mapped into the source frame through the
/// inverse relative pose and bilinearly sampled; outside the source extent
/// the value is 0. Output stays in [0, 1].
pub fn warp_occupancy(src: &Grid<f32>, ego_from_infra: &Pose, dst: GridSpec) -> Grid<f32> {
    warp(src, ego_from_infra, dst, true)
}

/// Same resampling without the [0, 1] clamp, for flow grids.
pub fn warp_field(src: &Grid<f32>, ego_from_infra: &Pose, dst: GridSpec) -> Grid<f32> {
    warp(src, ego_from_infra, dst, false)
}

fn warp(src: &Grid<f32>, ego_from_infra: &Pose, dst: GridSpec, clamp01: bool) -> Grid<f32> {
    let infra_from_ego = ego_from_infra.invert();
    let mut out = Grid::filled(dst, 0.0f32);
    for row in 0..dst.height {
        for col in 0..dst.width {
            let center = dst.cell_center(row, col);
            let p = infra_from_ego.transform_point([center[0], center[1], 0.0]);
            let mut v = bilinear_sample(src, [p[0], p[1]]);
            if clamp01 {
                v = v.clamp(0.0, 1.0);
            }
            out.set(row, col, v as f32);
        }
    }
    out
}

/// Cellwise max fusion plus thresholding into an [`OccupiedMask`].
pub fn fuse_occupancy(
    a: &Grid<f32>,
    b: &Grid<f32>,
    threshold: f32,
) -> Result<(Grid<f32>, OccupiedMask)> {
    if a.spec != b.spec {
        return Err(Error::Dimension(
            "occupancy fusion needs matching grids".into(),
        ));
    }
    let mut fused = Grid::filled(a.spec, 0.0f32);
    for (i, v) in fused.data.iter_mut().enumerate() {
        *v = a.data[i].max(b.data[i]);
    }
    let mask = mask_from(&fused, threshold);
    Ok((fused, mask))
}

/// Threshold a probability grid into an occupancy mask.
pub fn mask_from(grid: &Grid<f32>, threshold: f32) -> OccupiedMask {
    let mut cells = Grid::filled(grid.spec, false);
    for (i, v) in grid.data.iter().enumerate() {
        cells.data[i] = *v >= threshold;
    }
    OccupiedMask {
        cells,
        threshold_used: threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::AgentClass;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn query(track_id: i32, conf: f64, ref_xy: [f64; 2]) -> AgentQuery {
        AgentQuery {
            feature: vec![0.5, -0.5, 0.25, 0.25],
            ref_point: [ref_xy[0], ref_xy[1], 0.0],
            heading: 0.0,
            velocity: [1.0, 0.0],
            flow_ref: [0.0, 0.0],
            flow_feature: vec![0.0; 4],
            track_id,
            confidence: conf,
            box_size: [4.0, 2.0, 1.5],
            class: AgentClass::Car,
            timestamp: 0.0,
        }
    }

    #[test]
    fn temporal_sync_query_cases() {
        let mut q = query(1, 0.9, [10.0, 0.0]);
        q.flow_ref = [2.0, 0.0];
        let same = temporal_sync_queries(&[q.clone()], 0.0).unwrap();
        assert_eq!(same[0], q);

        let moved = temporal_sync_queries(&[q.clone()], 0.5).unwrap();
        assert_abs_diff_eq!(moved[0].ref_point[0], 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(moved[0].timestamp, 0.5, epsilon = 0.0);

        let mut still = query(2, 0.9, [3.0, 4.0]);
        still.flow_ref = [0.0, 0.0];
        let synced = temporal_sync_queries(&[still], 2.0).unwrap();
        assert_eq!(synced[0].ref_point, [3.0, 4.0, 0.0]);
        assert_abs_diff_eq!(synced[0].timestamp, 2.0, epsilon = 0.0);

        let mut future = query(3, 0.9, [0.0, 0.0]);
        future.timestamp = 5.0;
        assert!(temporal_sync_queries(&[future], 1.0).is_err());
    }

    #[test]
    fn temporal_sync_occupancy_cases() {
        let spec = GridSpec::new(2, 2, 1.0, 0.0, 0.0).unwrap();
        let mut msg = OccupancyMessage::zeros(spec, 1.0);
        msg.p0.data = vec![0.2, 0.9, 0.0, 1.0];
        msg.p1.data = vec![0.1, 0.5, -0.2, 0.0];
        let now = temporal_sync_occupancy(&msg, 1.0);
        assert_eq!(now.data, msg.p0.data);

        let later = temporal_sync_occupancy(&msg, 3.0);
        assert_abs_diff_eq!(later.data[0] as f64, 0.4, epsilon = 1e-6);
        assert_abs_diff_eq!(later.data[1] as f64, 1.0, epsilon = 0.0); // clamped from 1.9
        assert_abs_diff_eq!(later.data[2] as f64, 0.0, epsilon = 0.0); // clamped from -0.4

        let one_sec = temporal_sync_occupancy(&msg, 2.0);
        assert_abs_diff_eq!(one_sec.data[1] as f64, 1.0, epsilon = 0.0); // 1.4 clamps
    }

    #[test]
    fn spatial_sync_cases() {
        let q = query(1, 0.9, [1.0, 0.0]);
        let same = spatial_sync_queries(std::slice::from_ref(&q), &Pose::identity());
        assert_eq!(same[0], q);

        let rel = Pose::from_yaw(std::f64::consts::FRAC_PI_2, [1.0, 0.0, 0.0]);
        let out = spatial_sync_queries(std::slice::from_ref(&q), &rel);
        assert_abs_diff_eq!(out[0].ref_point[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].ref_point[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].heading, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);

        // Norm preservation under arbitrary poses.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose = Pose::from_yaw(
                rng.gen_range(-3.0..3.0),
                [rng.gen_range(-5.0..5.0), 0.0, 0.0],
            );
            let out = spatial_sync_queries(std::slice::from_ref(&q), &pose);
            let n_in: f64 = q.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n_out: f64 = out[0].feature.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n_in, n_out, epsilon = 1e-9);
        }
    }

    #[test]
    fn spatial_sync_is_a_group_action() {
        // sync(sync(q, P1), P2) == sync(q, P2 ∘ P1)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut q = query(
                1,
                0.9,
                [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)],
            );
            q.heading = rng.gen_range(-3.0..3.0);
            q.velocity = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            q.flow_ref = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let p1 = Pose::from_yaw(
                rng.gen_range(-3.0..3.0),
                [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0],
            );
            let p2 = Pose::from_yaw(
                rng.gen_range(-3.0..3.0),
                [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0],
            );
            let two_step = spatial_sync_queries(&spatial_sync_queries(&[q.clone()], &p1), &p2);
            let one_step = spatial_sync_queries(&[q.clone()], &p2.compose(&p1));
            for k in 0..3 {
                assert_abs_diff_eq!(
                    two_step[0].ref_point[k],
                    one_step[0].ref_point[k],
                    epsilon = 1e-9
                );
            }
            for (a, b) in two_step[0].feature.iter().zip(one_step[0].feature.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(
                wrap_angle(two_step[0].heading - one_step[0].heading),
                0.0,
                epsilon = 1e-9
            );
        }
    }

    /// Exhaustive minimum over all size-min(n,m) injections, honoring
    /// forbidden entries. Test-only oracle, independent of the solver.
    pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, usize) {
        let n = cost.len();
        let m = cost.first().map_or(0, |r| r.len());
        fn recurse(
            cost: &[Vec<f64>],
            row: usize,
            used: &mut Vec<bool>,
            acc_cost: f64,
            acc_cnt: usize,
            best: &mut (usize, f64),
        ) {
            let n = cost.len();
            if row == n {
                // Maximize matches, then minimize cost.
                if acc_cnt > best.0 || (acc_cnt == best.0 && acc_cost < best.1) {
                    *best = (acc_cnt, acc_cost);
                }
                return;
            }
            // Option: leave this row unmatched.
            recurse(cost, row + 1, used, acc_cost, acc_cnt, best);
            for col in 0..used.len() {
                if !used[col] && cost[row][col].is_finite() {
                    used[col] = true;
                    recurse(
                        cost,
                        row + 1,
                        used,
                        acc_cost + cost[row][col],
                        acc_cnt + 1,
                        best,
                    );
                    used[col] = false;
                }
            }
        }
        if n == 0 || m == 0 {
            return (0.0, 0);
        }
        let mut best = (0usize, f64::INFINITY);
        let mut used = vec![false; m];
        recurse(cost, 0, &mut used, 0.0, 0, &mut best);
        if best.0 == 0 {
            (0.0, 0)
        } else {
            (best.1, best.0)
        }
    }

    #[test]
    fn hungarian_examples() {
        // Brute force over the two 2x2 permutations: 1+4=5 vs 2+2=4.
        let pairs = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);

        let diag = hungarian(&[
            vec![0.0, 9.0, 9.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ]);
        assert_eq!(diag, vec![(0, 0), (1, 1), (2, 2)]);

        assert!(hungarian(&[]).is_empty());
        let empty_cols: Vec<Vec<f64>> = vec![vec![], vec![]];
        assert!(hungarian(&empty_cols).is_empty());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..1000 {
            let n = rng.gen_range(0..=6);
            let m = rng.gen_range(0..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rng.gen_bool(0.15) {
                                f64::INFINITY
                            } else {
                                // Integer-ish values so tie comparisons are exact.
                                rng.gen_range(0..100) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let pairs = hungarian(&cost);
            let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            let (best_cost, best_cnt) = brute_force_assignment(&cost);
            assert_eq!(pairs.len(), best_cnt, "case {case}: match count");
            assert_abs_diff_eq!(total, best_cost, epsilon = 1e-9);
        }
    }

    #[test]
    fn match_queries_cases() {
        let far_a = vec![query(1, 0.9, [0.0, 0.0])];
        let far_b = vec![query(2, 0.9, [100.0, 0.0])];
        let res = match_queries(&far_a, &far_b, 2.0);
        assert!(res.pairs.is_empty());
        assert_eq!(res.unmatched_infra, vec![0]);
        assert_eq!(res.unmatched_ego, vec![0]);

        let near_a = vec![query(1, 0.9, [1.0, 0.0])];
        let near_b = vec![query(2, 0.9, [1.5, 0.0])];
        let res = match_queries(&near_a, &near_b, 2.0);
        assert_eq!(res.pairs, vec![(0, 0)]);

        // Crossed costs prefer the off-diagonal global optimum.
        let infra = vec![query(1, 0.9, [0.0, 0.0]), query(2, 0.9, [1.0, 0.0])];
        let ego = vec![query(3, 0.9, [1.0, 0.0]), query(4, 0.9, [0.0, 0.0])];
        let res = match_queries(&infra, &ego, 2.0);
        assert_eq!(res.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn gate_soundness_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let infra: Vec<AgentQuery> = (0..rng.gen_range(0..8))
                .map(|i| {
                    query(
                        i,
                        0.9,
                        [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
                    )
                })
                .collect();
            let ego: Vec<AgentQuery> = (0..rng.gen_range(0..8))
                .map(|i| {
                    query(
                        100 + i,
                        0.9,
                        [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
                    )
                })
                .collect();
            let gate = rng.gen_range(0.5..4.0);
            let res = match_queries(&infra, &ego, gate);
            for &(i, j) in &res.pairs {
                let d = (infra[i].ref_point[0] - ego[j].ref_point[0])
                    .hypot(infra[i].ref_point[1] - ego[j].ref_point[1]);
                assert!(d <= gate);
            }
            // Partition completeness.
            assert_eq!(res.pairs.len() + res.unmatched_infra.len(), infra.len());
            assert_eq!(res.pairs.len() + res.unmatched_ego.len(), ego.len());
        }
    }

    #[test]
    fn fuse_matched_cases() {
        let cfg = FusionConfig::default();
        let a = query(1, 0.8, [0.0, 0.0]);
        let same = fuse_matched(&a, &a, &cfg);
        assert_eq!(same, a);

        let b = query(2, 0.8, [1.0, 0.0]);
        let mid = fuse_matched(&a, &b, &cfg);
        assert_abs_diff_eq!(mid.ref_point[0], 0.5, epsilon = 1e-12);
        assert_eq!(mid.track_id, 2);

        let hi = query(1, 0.9, [0.0, 0.0]);
        let lo = query(2, 0.3, [1.0, 0.0]);
        let fused = fuse_matched(&hi, &lo, &cfg);
        assert_abs_diff_eq!(fused.ref_point[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fused.confidence, 0.9, epsilon = 0.0);

        let z1 = query(1, 0.0, [0.0, 0.0]);
        let z2 = query(2, 0.0, [2.0, 0.0]);
        let avg = fuse_matched(&z1, &z2, &cfg);
        assert_abs_diff_eq!(avg.ref_point[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fuse_agents_partition_accounting() {
        let cfg = FusionConfig::default();
        let ego = vec![query(10, 0.9, [0.0, 0.0]), query(11, 0.8, [20.0, 0.0])];
        let same = fuse_agents(&[], &ego, &cfg);
        assert_eq!(same, ego);

        let infra = vec![query(5, 0.9, [50.0, 0.0])];
        let appended = fuse_agents(&infra, &[], &cfg);
        assert_eq!(appended.len(), 1);
        assert_eq!(appended[0].track_id, 5 + cfg.infra_id_offset);
        assert_abs_diff_eq!(appended[0].confidence, 0.9 * 0.8, epsilon = 1e-12);

        // 1 matched + 1 infra-only + 1 ego-only => 3 outputs.
        let infra = vec![query(5, 0.9, [0.3, 0.0]), query(6, 0.9, [50.0, 0.0])];
        let out = fuse_agents(&infra, &ego, &cfg);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].track_id, 10);
        assert_eq!(out[1].track_id, 11);
        assert_eq!(out[2].track_id, 6 + cfg.infra_id_offset);
    }

    #[test]
    fn fuse_agents_filters_low_confidence() {
        let cfg = FusionConfig::default();
        let infra = vec![query(5, 0.35, [50.0, 0.0])];
        // 0.35 * 0.8 = 0.28 < 0.3 keep threshold.
        let out = fuse_agents(&infra, &[], &cfg);
        assert!(out.is_empty());
    }

    #[test]
    fn ego_filter_cases() {
        let cfg = FusionConfig::default();
        let spec = GridSpec::new(40, 40, 0.5, -10.0, -10.0).unwrap();
        let occ = Grid::filled(spec, 1.0f32);
        let queries = vec![
            query(1, 0.9, [0.0, 0.0]),   // ego center: removed
            query(2, 0.9, [10.0, 10.0]), // far: kept (outside grid's rect too)
            query(3, 0.9, [2.7, 0.0]),   // |x| <= 2.3 + 0.5: removed
            query(4, 0.9, [2.9, 0.0]),   // just outside: kept
        ];
        let (kept, grid) = ego_filter(queries, occ, &cfg);
        assert_eq!(
            kept.iter().map(|q| q.track_id).collect::<Vec<_>>(),
            vec![2, 4]
        );
        // Cell at the origin cleared, far corner untouched.
        assert_eq!(grid.at_world([0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(grid.at_world([8.0, 8.0]).unwrap(), 1.0);
    }

    fn lane(points: Vec<[f64; 2]>, class: crate::core::LaneClass) -> LaneQuery {
        LaneQuery {
            feature: vec![0.0; 4],
            points,
            class,
            confidence: 1.0,
        }
    }

    #[test]
    fn fuse_lanes_cases() {
        use crate::core::LaneClass;
        let a = lane(vec![[0.0, 0.0], [10.0, 0.0]], LaneClass::Lane);
        let b = lane(vec![[0.0, 5.0], [10.0, 5.0]], LaneClass::Lane);
        let disjoint = fuse_lanes(std::slice::from_ref(&b), std::slice::from_ref(&a));
        assert_eq!(disjoint.len(), 2);
        assert_eq!(disjoint[0], a);

        let dup = fuse_lanes(std::slice::from_ref(&a), std::slice::from_ref(&a));
        assert_eq!(dup.len(), 1);

        let close = lane(vec![[0.0, 0.3], [10.0, 0.3]], LaneClass::Lane);
        assert_eq!(fuse_lanes(&[close], std::slice::from_ref(&a)).len(), 1);
        let offset = lane(vec![[0.0, 2.0], [10.0, 2.0]], LaneClass::Lane);
        assert_eq!(fuse_lanes(&[offset], std::slice::from_ref(&a)).len(), 2);

        // Same geometry, different class: kept.
        let cw = lane(vec![[0.0, 0.0], [10.0, 0.0]], LaneClass::Crosswalk);
        assert_eq!(fuse_lanes(&[cw], &[a]).len(), 2);
    }

    #[test]
    fn warp_identity_is_exact() {
        let spec = GridSpec::new(16, 16, 0.5, -4.0, -4.0).unwrap();
        let mut src = Grid::filled(spec, 0.0f32);
        for (i, v) in src.data.iter_mut().enumerate() {
            *v = ((i % 7) as f32) / 7.0;
        }
        let out = warp_occupancy(&src, &Pose::identity(), spec);
        assert_eq!(out.data, src.data);
    }

    #[test]
    fn warp_integer_shift_is_exact() {
        let spec = GridSpec::new(16, 16, 0.5, 0.0, 0.0).unwrap();
        let mut src = Grid::filled(spec, 0.0f32);
        src.set(4, 6, 0.8);
        // ego_from_infra translates infra content by exactly 2 cells in +x.
        let pose = Pose::from_yaw(0.0, [1.0, 0.0, 0.0]);
        let out = warp_occupancy(&src, &pose, spec);
        assert_eq!(out.get(4, 8), 0.8);
        assert_eq!(out.get(4, 6), 0.0);
        let total: f32 = out.data.iter().sum();
        assert_eq!(total, 0.8);
    }

    #[test]
    fn warp_constant_field_stays_in_range() {
        let src_spec = GridSpec::new(10, 10, 1.0, 0.0, 0.0).unwrap();
        let src = Grid::filled(src_spec, 1.0f32);
        let dst_spec = GridSpec::new(20, 20, 1.0, -10.0, -10.0).unwrap();
        let out = warp_occupancy(&src, &Pose::from_yaw(0.7, [2.0, 1.0, 0.0]), dst_spec);
        for v in &out.data {
            assert!(*v >= 0.0 && *v <= 1.0);
        }
        assert!(out.data.iter().any(|v| *v > 0.9));
        assert!(out.data.contains(&0.0));
    }

    #[test]
    fn fuse_occupancy_algebra() {
        let spec = GridSpec::new(4, 4, 1.0, 0.0, 0.0).unwrap();
        let mut a = Grid::filled(spec, 0.0f32);
        let mut b = Grid::filled(spec, 0.0f32);
        a.data[0] = 0.3;
        b.data[0] = 0.7;
        a.data[5] = 0.6;

        let (fused, mask) = fuse_occupancy(&a, &b, 0.5).unwrap();
        assert_eq!(fused.data[0], 0.7);
        assert!(mask.cells.data[0]);
        assert!(mask.cells.data[5]);
        assert!(!mask.cells.data[1]);

        let zero = Grid::filled(spec, 0.0f32);
        let (same, _) = fuse_occupancy(&a, &zero, 0.5).unwrap();
        assert_eq!(same.data, a.data);

        let (ab, _) = fuse_occupancy(&a, &b, 0.5).unwrap();
        let (ba, _) = fuse_occupancy(&b, &a, 0.5).unwrap();
        assert_eq!(ab.data, ba.data);

        let (aa, _) = fuse_occupancy(&a, &a, 0.5).unwrap();
        assert_eq!(aa.data, a.data);

        // Monotone: raising a cell never lowers the fusion.
        let mut a2 = a.clone();
        a2.data[3] = 0.9;
        let (f2, _) = fuse_occupancy(&a2, &b, 0.5).unwrap();
        for i in 0..f2.data.len() {
            assert!(f2.data[i] >= ab.data[i]);
        }

        let other = Grid::filled(GridSpec::new(3, 4, 1.0, 0.0, 0.0).unwrap(), 0.0f32);
        assert!(fuse_occupancy(&a, &other, 0.5).is_err());
    }
}
