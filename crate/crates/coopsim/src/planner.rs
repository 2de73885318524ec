//! Command-conditioned trajectory selection over the fused scene:
//! constant-velocity forecasting of occupied grids, a deterministic family of
//! constant-curvature candidates, cost minimization against collisions /
//! off-road / smoothness, and on-road adjustment.

use serde::{Deserialize, Serialize};

use crate::core::{rect_overlaps_mask, stamp_oriented_rect, Grid, OccupiedMask};
use crate::fusion::{temporal_sync_occupancy, FusedScene};

/// High-level driving command conditioning the candidate family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    TurnLeft,
    KeepForward,
    TurnRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Planned path: waypoints at fixed `dt` starting at the ego origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// Position at time `t` (must be one of the waypoint timestamps).
    pub fn at(&self, t: f64) -> Option<[f64; 2]> {
        self.waypoints
            .iter()
            .find(|w| (w.t - t).abs() < 1e-9)
            .map(|w| [w.x, w.y])
    }

    /// Motion direction at waypoint `i`; falls back to the previous segment
    /// (or 0) when a segment is degenerate.
    pub fn heading_at(&self, i: usize) -> f64 {
        let seg = |a: &Waypoint, b: &Waypoint| -> Option<f64> {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            if dx.hypot(dy) > 1e-9 {
                Some(dy.atan2(dx))
            } else {
                None
            }
        };
        for k in (0..=i.min(self.waypoints.len().saturating_sub(2))).rev() {
            if let Some(h) = seg(&self.waypoints[k], &self.waypoints[k + 1]) {
                return h;
            }
        }
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Prediction horizon in seconds.
    pub horizon: f64,
    pub dt: f64,
    /// Curvature samples per command.
    pub n_per_command: usize,
    pub w_col: f64,
    pub w_road: f64,
    pub w_smooth: f64,
    /// Maximum distance an off-road waypoint may be snapped back, meters.
    pub snap_radius: f64,
    /// Ego footprint (length, width) used for collision checks.
    pub ego_box: [f64; 2],
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 4.5,
            dt: 0.5,
            n_per_command: 5,
            w_col: 1000.0,
            w_road: 10.0,
            w_smooth: 1.0,
            snap_radius: 1.0,
            ego_box: [4.6, 1.8],
        }
    }
}

/// Per-step occupied grids over the horizon: constant-velocity footprints of
/// the fused queries unioned with the thresholded occupancy extrapolation.
pub fn forecast_agents(scene: &FusedScene, cfg: &PlannerConfig) -> Vec<OccupiedMask> {
    let spec = scene.occupancy.grid();
    let threshold = scene.mask.threshold_used;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let dt = k as f64 * cfg.dt;
        let mut cells = Grid::filled(spec, false);
        for q in &scene.queries {
            let center = [
                q.ref_point[0] + q.velocity[0] * dt,
                q.ref_point[1] + q.velocity[1] * dt,
            ];
            stamp_oriented_rect(&mut cells, center, q.heading, q.box_size[0], q.box_size[1]);
        }
        let extrapolated =
            temporal_sync_occupancy(&scene.occupancy, scene.occupancy.timestamp + dt);
        for (i, v) in extrapolated.data.iter().enumerate() {
            if *v >= threshold {
                cells.data[i] = true;
            }
        }
        out.push(OccupiedMask {
            cells,
            threshold_used: threshold,
        });
    }
    out
}

fn forward_kappas(n: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let m = ((n.saturating_sub(1)) as f64 / 2.0).ceil().max(1.0);
    let mut i = 1.0;
    while out.len() < n {
        out.push(0.02 * i / m);
        if out.len() < n {
            out.push(-0.02 * i / m);
        }
        i += 1.0;
    }
    out
}

fn turn_kappas(n: usize, sign: f64) -> Vec<f64> {
    if n == 1 {
        return vec![sign * 0.08];
    }
    (0..n)
        .map(|i| sign * (0.03 + 0.10 * i as f64 / (n - 1) as f64))
        .collect()
}

/// Deterministic candidate family: constant-curvature arcs per command
/// crossed with speed profiles {1.0, 0.8, 1.2, 0.6} x ego speed, sampled at
/// `dt` over the horizon. List order is curvature-major, so index 0 of
/// `KeepForward` is the straight constant-speed candidate.
pub fn generate_candidates(
    ego_speed: f64,
    command: Command,
    cfg: &PlannerConfig,
) -> Vec<Trajectory> {
    let kappas = match command {
        Command::KeepForward => forward_kappas(cfg.n_per_command),
        Command::TurnLeft => turn_kappas(cfg.n_per_command, 1.0),
        Command::TurnRight => turn_kappas(cfg.n_per_command, -1.0),
    };
    let speeds = [1.0, 0.8, 1.2, 0.6];
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut out = Vec::with_capacity(kappas.len() * speeds.len());
    for kappa in &kappas {
        for sf in &speeds {
            let v = ego_speed * sf;
            let waypoints = (0..=steps)
                .map(|k| {
                    let t = k as f64 * cfg.dt;
                    let s = v * t;
                    let (x, y) = if kappa.abs() < 1e-12 {
                        (s, 0.0)
                    } else {
                        ((kappa * s).sin() / kappa, (1.0 - (kappa * s).cos()) / kappa)
                    };
                    Waypoint { t, x, y }
                })
                .collect();
            out.push(Trajectory { waypoints });
        }
    }
    out
}

/// `w_col * collisions + w_road * off_road + w_smooth * sum ||second diff||^2`.
/// `step_masks[k]` must be aligned with waypoint `k`'s timestamp.
pub fn trajectory_cost(
    traj: &Trajectory,
    step_masks: &[OccupiedMask],
    drivable: &Grid<bool>,
    cfg: &PlannerConfig,
) -> f64 {
    assert!(
        step_masks.len() >= traj.waypoints.len(),
        "one mask per waypoint"
    );
    let mut collisions = 0usize;
    let mut off_road = 0usize;
    for (k, w) in traj.waypoints.iter().enumerate() {
        let heading = traj.heading_at(k);
        if rect_overlaps_mask(
            &step_masks[k].cells,
            [w.x, w.y],
            heading,
            cfg.ego_box[0],
            cfg.ego_box[1],
        ) {
            collisions += 1;
        }
        if !drivable.at_world([w.x, w.y]).unwrap_or(false) {
            off_road += 1;
        }
    }
    cfg.w_col * collisions as f64 + cfg.w_road * off_road as f64 + cfg.w_smooth * smoothness(traj)
}

fn smoothness(traj: &Trajectory) -> f64 {
    let w = &traj.waypoints;
    let mut total = 0.0;
    for k in 1..w.len().saturating_sub(1) {
        let ddx = w[k + 1].x - 2.0 * w[k].x + w[k - 1].x;
        let ddy = w[k + 1].y - 2.0 * w[k].y + w[k - 1].y;
        total += ddx * ddx + ddy * ddy;
    }
    total
}

/// Argmin of [`trajectory_cost`] over the candidate family, ties broken by
/// lowest candidate index, followed by [`adjust_to_road`]. Also checks the
/// safety-dominance bound: a colliding candidate can never beat a
/// collision-free one on road/smoothness terms alone.
pub fn plan(
    scene: &FusedScene,
    ego_speed: f64,
    command: Command,
    drivable: &Grid<bool>,
    cfg: &PlannerConfig,
) -> Trajectory {
    let candidates = generate_candidates(ego_speed, command, cfg);
    let masks = forecast_agents(scene, cfg);

    let max_non_collision: f64 = candidates
        .iter()
        .map(|t| cfg.w_road * t.waypoints.len() as f64 + cfg.w_smooth * smoothness(t))
        .fold(0.0, f64::max);
    assert!(
        cfg.w_col > max_non_collision,
        "collision weight {} must dominate road+smoothness bound {max_non_collision}",
        cfg.w_col
    );

    let mut best_idx = 0usize;
    let mut best_cost = f64::INFINITY;
    for (i, cand) in candidates.iter().enumerate() {
        let c = trajectory_cost(cand, &masks, drivable, cfg);
        if c < best_cost {
            best_cost = c;
            best_idx = i;
        }
    }
    adjust_to_road(&candidates[best_idx], drivable, cfg)
}

/// Snaps each off-road waypoint to the nearest drivable cell center within
/// `snap_radius`; on-road waypoints and far-off-road waypoints are untouched.
pub fn adjust_to_road(traj: &Trajectory, drivable: &Grid<bool>, cfg: &PlannerConfig) -> Trajectory {
    let spec = drivable.spec;
    let reach = (cfg.snap_radius / spec.resolution).ceil() as i64 + 1;
    let mut out = traj.clone();
    for w in &mut out.waypoints {
        if drivable.at_world([w.x, w.y]).unwrap_or(false) {
            continue;
        }
        // Nearest cell search around the waypoint.
        let anchor_col = ((w.x - spec.x_min) / spec.resolution).floor() as i64;
        let anchor_row = ((w.y - spec.y_min) / spec.resolution).floor() as i64;
        let mut best: Option<(f64, usize, usize)> = None;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (anchor_row + dr, anchor_col + dc);
                if r < 0 || c < 0 || r >= spec.height as i64 || c >= spec.width as i64 {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                if !drivable.get(r, c) {
                    continue;
                }
                let center = spec.cell_center(r, c);
                let d = (center[0] - w.x).hypot(center[1] - w.y);
                if d <= cfg.snap_radius {
                    let better = match &best {
                        None => true,
                        Some((bd, br, bc)) => d < *bd || (d == *bd && (r, c) < (*br, *bc)),
                    };
                    if better {
                        best = Some((d, r, c));
                    }
                }
            }
        }
        if let Some((_, r, c)) = best {
            let center = spec.cell_center(r, c);
            w.x = center[0];
            w.y = center[1];
        }
    }
    out
}
