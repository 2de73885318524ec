//! Deterministic synthetic world generation and per-view oracle perception.
//!
//! Scenarios are intersection scenes: a scripted ego vehicle, straight-moving
//! background agents, lane/crosswalk polylines, and a drivable-area mask. The
//! oracle `perceive` stands in for a camera + neural perception stack: it
//! emits agent queries, lane queries, and an occupancy probability map per
//! view, with configurable noise, misses, and false positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::core::{
    stamp_oriented_rect, AgentClass, AgentQuery, Grid, GridSpec, LaneClass, LaneQuery,
    OccupancyMessage, Pose,
};
use crate::error::{Error, Result};
use crate::planner::Command;

/// Stream tags for the counter-based RNG scheme: one independent stream per
/// (master seed, role, frame).
pub const STREAM_WORLD: u64 = 0;
pub const STREAM_EGO: u64 = 1;
pub const STREAM_INFRA: u64 = 2;
pub const STREAM_CHANNEL: u64 = 3;

/// Track-id namespaces per view; oracle track ids are `base + ground-truth id`
/// so that cross-view id equality can never be exploited by fusion.
pub const EGO_TRACK_BASE: i32 = 1_000_000;
pub const INFRA_TRACK_BASE: i32 = 2_000_000;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Folds two seeds into one; used to derive per-run channel and scenario
/// seeds from a base config seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Counter-based seeded stream: deterministic for a fixed (master, tags)
/// pair, independent of evaluation order and parallelism.
pub fn substream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(master ^ 0xC00B_51D3_7E57_0001);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    let mut seed = [0u8; 32];
    let mut x = s;
    for chunk in seed.chunks_mut(8) {
        x = splitmix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Ground-truth kinematic state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: i32,
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub turn_rate: f64,
    pub box_size: [f64; 3],
    pub class: AgentClass,
}

/// One road element polyline in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub points: Vec<[f64; 2]>,
    pub class: LaneClass,
}

/// One tick of ground truth. Lanes and the drivable mask are static per
/// layout and live on [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFrame {
    pub time: f64,
    pub agents: Vec<AgentState>,
    pub ego: AgentState,
    pub ego_pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    CrossIntersection,
    TIntersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Total duration in seconds; frames at t = 0, dt, ..., duration.
    pub duration: f64,
    pub dt: f64,
    pub n_agents: usize,
    pub layout: Layout,
    pub ego_command: Command,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            duration: 10.0,
            dt: 0.5,
            n_agents: 8,
            layout: Layout::CrossIntersection,
            ego_command: Command::KeepForward,
        }
    }
}

/// A generated timeline plus the static map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub lanes: Vec<LanePolyline>,
    pub drivable: Grid<bool>,
    pub frames: Vec<WorldFrame>,
}

impl Scenario {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Sensor model: mounting pose, field of view in the sensor frame, noise
/// magnitudes, and the grid its occupancy map is rasterized on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// world_from_sensor.
    pub mount_pose: Pose,
    /// (x_min, x_max, y_min, y_max) in the sensor frame, meters.
    pub fov_rect: [f64; 4],
    pub pos_noise_sigma: f64,
    pub heading_noise_sigma: f64,
    pub miss_prob: f64,
    /// Expected false positives per frame (Poisson rate).
    pub false_pos_rate: f64,
    /// confidence = clamp(conf_base - conf_decay * distance, 0, 1).
    pub conf_base: f64,
    pub conf_decay: f64,
    pub grid: GridSpec,
    pub track_id_base: i32,
    /// Whether this sensor perceives the ego vehicle as an agent
    /// (infrastructure does, the ego camera does not).
    pub sees_ego: bool,
    pub feature_dim: usize,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fov_rect[0] >= self.fov_rect[1] || self.fov_rect[2] >= self.fov_rect[3] {
            return Err(Error::Config("fov extents must be ordered".into()));
        }
        if self.pos_noise_sigma < 0.0 || self.heading_noise_sigma < 0.0 {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(Error::Config("miss_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Oracle perception output for one view at one tick. All geometry is in the
/// sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceivedFrame {
    pub agent_queries: Vec<AgentQuery>,
    pub lane_queries: Vec<LaneQuery>,
    pub occupancy: OccupancyMessage,
    pub timestamp: f64,
}

/// Kinematic step: heading first, then position along the updated heading.
pub fn advance(state: &AgentState, dt: f64) -> AgentState {
    let mut s = *state;
    s.heading += s.turn_rate * dt;
    s.position[0] += s.speed * dt * s.heading.cos();
    s.position[1] += s.speed * dt * s.heading.sin();
    s
}

const ROAD_HALF_WIDTH: f64 = 7.0;
const LANE_OFFSET: f64 = 1.75;
const JUNCTION_EDGE: f64 = 9.0;
const EGO_START_Y: f64 = -40.0;
const EGO_SPEED: f64 = 8.0;
pub const EGO_BOX: [f64; 3] = [4.6, 1.8, 1.6];

fn world_grid_spec() -> GridSpec {
    GridSpec {
        width: 240,
        height: 240,
        resolution: 0.5,
        x_min: -60.0,
        y_min: -60.0,
    }
}

fn lane_points(axis_x: bool, fixed: f64, from: f64, to: f64) -> Vec<[f64; 2]> {
    let n = 5;
    (0..n)
        .map(|i| {
            let u = from + (to - from) * i as f64 / (n - 1) as f64;
            if axis_x {
                [u, fixed]
            } else {
                [fixed, u]
            }
        })
        .collect()
}

fn layout_geometry(layout: Layout) -> (Vec<LanePolyline>, Grid<bool>) {
    let mut lanes = Vec::new();
    let lane = |axis_x: bool, fixed: f64, from: f64, to: f64| LanePolyline {
        points: lane_points(axis_x, fixed, from, to),
        class: LaneClass::Lane,
    };
    let crosswalk = |axis_x: bool, fixed: f64| LanePolyline {
        points: if axis_x {
            vec![
                [-ROAD_HALF_WIDTH, fixed],
                [0.0, fixed],
                [ROAD_HALF_WIDTH, fixed],
            ]
        } else {
            vec![
                [fixed, -ROAD_HALF_WIDTH],
                [fixed, 0.0],
                [fixed, ROAD_HALF_WIDTH],
            ]
        },
        class: LaneClass::Crosswalk,
    };

    // East-west road is present in both layouts.
    lanes.push(lane(true, -LANE_OFFSET, -58.0, 58.0)); // eastbound
    lanes.push(lane(true, LANE_OFFSET, -58.0, 58.0)); // westbound
    match layout {
        Layout::CrossIntersection => {
            lanes.push(lane(false, LANE_OFFSET, -58.0, 58.0)); // northbound
            lanes.push(lane(false, -LANE_OFFSET, -58.0, 58.0)); // southbound
            lanes.push(crosswalk(false, -JUNCTION_EDGE));
            lanes.push(crosswalk(false, JUNCTION_EDGE));
            lanes.push(crosswalk(true, JUNCTION_EDGE));
        }
        Layout::TIntersection => {
            lanes.push(lane(false, LANE_OFFSET, -58.0, 0.0));
            lanes.push(lane(false, -LANE_OFFSET, -58.0, 0.0));
            lanes.push(crosswalk(false, -JUNCTION_EDGE));
            lanes.push(crosswalk(false, JUNCTION_EDGE));
        }
    }

    let spec = world_grid_spec();
    let mut drivable = Grid::filled(spec, false);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let [x, y] = spec.cell_center(row, col);
            let in_ew = y.abs() <= ROAD_HALF_WIDTH;
            let in_ns = x.abs() <= ROAD_HALF_WIDTH
                && match layout {
                    Layout::CrossIntersection => true,
                    Layout::TIntersection => y <= ROAD_HALF_WIDTH,
                };
            if in_ew || in_ns {
                drivable.set(row, col, true);
            }
        }
    }
    (lanes, drivable)
}

/// Scripted ego state: straight approach on the northbound lane, then a
/// constant-radius turn through the junction when commanded.
fn ego_state_at(layout: Layout, command: Command, t: f64) -> AgentState {
    let v = EGO_SPEED;
    let s = v * t;
    // Straight-approach distance from the start to the junction entry.
    let approach = EGO_START_Y.abs() - JUNCTION_EDGE;
    let mk = |position: [f64; 2], heading: f64, speed: f64, turn_rate: f64| AgentState {
        id: -1,
        position,
        heading,
        speed,
        turn_rate,
        box_size: EGO_BOX,
        class: AgentClass::Car,
    };

    let straight_through =
        matches!(command, Command::KeepForward) && layout == Layout::CrossIntersection;
    if straight_through {
        return mk(
            [LANE_OFFSET, EGO_START_Y + s],
            std::f64::consts::FRAC_PI_2,
            v,
            0.0,
        );
    }
    if matches!(command, Command::KeepForward) {
        // T-intersection with a forward command: stop at the junction edge.
        if s <= approach {
            return mk(
                [LANE_OFFSET, EGO_START_Y + s],
                std::f64::consts::FRAC_PI_2,
                v,
                0.0,
            );
        }
        return mk(
            [LANE_OFFSET, -JUNCTION_EDGE],
            std::f64::consts::FRAC_PI_2,
            0.0,
            0.0,
        );
    }

    // Turn radii chosen so the ego exits on the correct outgoing lane.
    let (radius, sign) = match command {
        Command::TurnLeft => (JUNCTION_EDGE + LANE_OFFSET, 1.0),
        Command::TurnRight => (JUNCTION_EDGE - LANE_OFFSET, -1.0),
        Command::KeepForward => unreachable!(),
    };
    let arc_len = radius * std::f64::consts::FRAC_PI_2;
    if s <= approach {
        return mk(
            [LANE_OFFSET, EGO_START_Y + s],
            std::f64::consts::FRAC_PI_2,
            v,
            0.0,
        );
    }
    if s <= approach + arc_len {
        let phi = (s - approach) / radius;
        let entry_y = -JUNCTION_EDGE;
        if sign > 0.0 {
            // CCW about (LANE_OFFSET - radius, entry_y); start angle 0.
            let cx = LANE_OFFSET - radius;
            let pos = [cx + radius * phi.cos(), entry_y + radius * phi.sin()];
            return mk(pos, std::f64::consts::FRAC_PI_2 + phi, v, v / radius);
        }
        // CW about (LANE_OFFSET + radius, entry_y); start angle pi.
        let cx = LANE_OFFSET + radius;
        let ang = std::f64::consts::PI - phi;
        let pos = [cx + radius * ang.cos(), entry_y + radius * ang.sin()];
        return mk(pos, std::f64::consts::FRAC_PI_2 - phi, v, -v / radius);
    }
    let d = s - approach - arc_len;
    if sign > 0.0 {
        // Exited westbound at (-JUNCTION_EDGE, LANE_OFFSET).
        return mk(
            [-JUNCTION_EDGE - d, LANE_OFFSET],
            std::f64::consts::PI,
            v,
            0.0,
        );
    }
    mk([JUNCTION_EDGE + d, -LANE_OFFSET], 0.0, v, 0.0)
}

/// Seeded initial states for the background agents. Agent 0 (when present) is
/// a crossing vehicle timed to reach the junction alongside the ego, which is
/// what makes infrastructure data matter.
fn spawn_agents(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<AgentState> {
    let mut agents = Vec::with_capacity(config.n_agents);
    for i in 0..config.n_agents {
        if i == 0 {
            let eastbound = rng.gen_bool(0.5);
            let speed = rng.gen_range(5.0..9.0);
            let t_star = (EGO_START_Y.abs() / EGO_SPEED) + rng.gen_range(-0.3..0.3);
            let (x0, y, heading) = if eastbound {
                (-speed * t_star, -LANE_OFFSET, 0.0)
            } else {
                (speed * t_star, LANE_OFFSET, std::f64::consts::PI)
            };
            agents.push(AgentState {
                id: 0,
                position: [x0, y],
                heading,
                speed,
                turn_rate: 0.0,
                box_size: [4.6, 1.8, 1.5],
                class: AgentClass::Car,
            });
            continue;
        }
        let class_draw: f64 = rng.gen();
        let (class, box_size, speed) = if class_draw < 0.8 {
            (
                AgentClass::Car,
                [rng.gen_range(4.2..4.9), 1.8, 1.5],
                rng.gen_range(4.0..10.0),
            )
        } else if class_draw < 0.9 {
            (
                AgentClass::Bicycle,
                [1.8, 0.6, 1.2],
                rng.gen_range(2.0..6.0),
            )
        } else {
            (
                AgentClass::Pedestrian,
                [0.6, 0.6, 1.7],
                rng.gen_range(1.0..2.0),
            )
        };
        let on_ew = rng.gen_bool(0.5);
        // The draw is always consumed to keep streams aligned; north-south
        // traffic runs southbound only so the scripted ego's lane stays
        // clear of ground-truth conflicts other than the crosser.
        let positive_dir = rng.gen_bool(0.5) && on_ew;
        let mut u0: f64 = rng.gen_range(-48.0..48.0);
        let heading = match (on_ew, positive_dir) {
            (true, true) => 0.0,
            (true, false) => std::f64::consts::PI,
            (false, _) => -std::f64::consts::FRAC_PI_2,
        };
        // Keep the right-hand lane for the travel direction.
        let lane = if positive_dir {
            -LANE_OFFSET
        } else {
            LANE_OFFSET
        };
        if !on_ew && config.layout == Layout::TIntersection {
            u0 = u0.min(-10.0);
        }
        let position = if on_ew { [u0, lane] } else { [-lane, u0] };
        agents.push(AgentState {
            id: i as i32,
            position,
            heading,
            speed,
            turn_rate: 0.0,
            box_size,
            class,
        });
    }
    agents
}

/// Generates the full deterministic timeline for a config.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    if config.dt <= 0.0 {
        return Err(Error::Config("dt must be > 0".into()));
    }
    if config.duration < config.dt {
        return Err(Error::Config("duration must be >= dt".into()));
    }
    let (lanes, drivable) = layout_geometry(config.layout);
    let mut rng = substream(config.seed, &[STREAM_WORLD]);
    let initial = spawn_agents(config, &mut rng);

    let steps = (config.duration / config.dt + 1e-9).floor() as usize;
    let mut frames = Vec::with_capacity(steps + 1);
    let mut agents = initial;
    for k in 0..=steps {
        let t = k as f64 * config.dt;
        if k > 0 {
            agents = agents.iter().map(|a| advance(a, config.dt)).collect();
        }
        let ego = ego_state_at(config.layout, config.ego_command, t);
        let ego_pose = Pose::from_yaw(ego.heading, [ego.position[0], ego.position[1], 0.0]);
        frames.push(WorldFrame {
            time: t,
            agents: agents.clone(),
            ego,
            ego_pose,
        });
    }
    Ok(Scenario {
        config: config.clone(),
        lanes,
        drivable,
        frames,
    })
}

/// Ground-truth occupancy: cells covered by any agent footprint, expressed in
/// the frame given by `frame_pose` (world_from_frame). The ego is excluded.
pub fn rasterize_agents(frame: &WorldFrame, grid: GridSpec, frame_pose: &Pose) -> Grid<bool> {
    let inv = frame_pose.invert();
    let yaw = frame_pose.yaw();
    let mut out = Grid::filled(grid, false);
    for agent in &frame.agents {
        let p = inv.transform_point([agent.position[0], agent.position[1], 0.0]);
        stamp_oriented_rect(
            &mut out,
            [p[0], p[1]],
            agent.heading - yaw,
            agent.box_size[0],
            agent.box_size[1],
        );
    }
    out
}

/// Unit-norm per-class base vector with consecutive feature pairs rotated
/// in-plane by `heading`. The embedding is what a learned feature would carry
/// implicitly: class identity plus orientation.
pub fn deterministic_embedding(
    class: AgentClass,
    _box_size: [f64; 3],
    heading: f64,
    dim: usize,
) -> Vec<f64> {
    assert!(dim.is_multiple_of(2), "feature dimension must be even");
    rotate_feature_pairs(&class_base_vector(class.to_u8() as u64, dim), heading)
}

/// Base embedding for lane queries (no orientation content).
pub fn lane_embedding(class: LaneClass, dim: usize) -> Vec<f64> {
    assert!(dim.is_multiple_of(2), "feature dimension must be even");
    class_base_vector(16 + class.to_u8() as u64, dim)
}

fn class_base_vector(class_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = substream(0x0E_B3DD_1146, &[class_seed, dim as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Rotates consecutive feature pairs (2k, 2k+1) in-plane by `angle`.
pub fn rotate_feature_pairs(feature: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(feature.len());
    for pair in feature.chunks(2) {
        if pair.len() == 2 {
            out.push(c * pair[0] - s * pair[1]);
            out.push(s * pair[0] + c * pair[1]);
        } else {
            out.push(pair[0]);
        }
    }
    out
}

fn clamp_to_fov(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo, hi)
}

/// Clips a world polyline to the sensor FOV rectangle, returning the pieces
/// (each with at least two points) in sensor-frame coordinates.
fn clip_polyline_to_fov(
    points: &[[f64; 2]],
    to_sensor: &Pose,
    fov: [f64; 4],
) -> Vec<Vec<[f64; 2]>> {
    let pts: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let q = to_sensor.transform_point([p[0], p[1], 0.0]);
            [q[0], q[1]]
        })
        .collect();
    let mut pieces: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut current: Vec<[f64; 2]> = Vec::new();
    for w in pts.windows(2) {
        if let Some((a, b)) = clip_segment(w[0], w[1], fov) {
            let extends = current
                .last()
                .map(|last| (last[0] - a[0]).abs() < 1e-9 && (last[1] - a[1]).abs() < 1e-9)
                .unwrap_or(false);
            if extends {
                current.push(b);
            } else {
                if current.len() >= 2 {
                    pieces.push(std::mem::take(&mut current));
                } else {
                    current.clear();
                }
                current.push(a);
                current.push(b);
            }
        }
    }
    if current.len() >= 2 {
        pieces.push(current);
    }
    pieces
}

/// Liang-Barsky segment clip against an axis-aligned rectangle.
fn clip_segment(a: [f64; 2], b: [f64; 2], fov: [f64; 4]) -> Option<([f64; 2], [f64; 2])> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    let checks = [
        (-dx, a[0] - fov[0]),
        (dx, fov[1] - a[0]),
        (-dy, a[1] - fov[2]),
        (dy, fov[3] - a[1]),
    ];
    for (p, q) in checks {
        if p.abs() < 1e-12 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            t0 = t0.max(r);
        } else {
            t1 = t1.min(r);
        }
        if t0 > t1 {
            return None;
        }
    }
    let lerp = |t: f64| [a[0] + t * dx, a[1] + t * dy];
    let (p0, p1) = (lerp(t0), lerp(t1));
    if (p0[0] - p1[0]).abs() < 1e-12 && (p0[1] - p1[1]).abs() < 1e-12 {
        return None;
    }
    Some((p0, p1))
}

/// Oracle perception for one view. Deterministic for a given rng stream.
pub fn perceive(
    frame: &WorldFrame,
    lanes: &[LanePolyline],
    sensor: &SensorSpec,
    rng: &mut ChaCha8Rng,
) -> PerceivedFrame {
    let to_sensor = sensor.mount_pose.invert();
    let mount_yaw = sensor.mount_pose.yaw();
    let fov = sensor.fov_rect;
    let normal_pos = Normal::new(0.0, sensor.pos_noise_sigma).expect("sigma >= 0");
    let normal_heading = Normal::new(0.0, sensor.heading_noise_sigma).expect("sigma >= 0");

    let mut candidates: Vec<&AgentState> = frame.agents.iter().collect();
    let ego = frame.ego;
    if sensor.sees_ego {
        candidates.push(&ego);
    }

    let mut queries = Vec::new();
    for agent in candidates {
        // Fixed draw count per candidate keeps streams aligned across
        // parameter settings.
        let miss_draw: f64 = rng.gen();
        let nx = normal_pos.sample(rng);
        let ny = normal_pos.sample(rng);
        let nh = normal_heading.sample(rng);

        let p = to_sensor.transform_point([agent.position[0], agent.position[1], 0.0]);
        let in_fov = p[0] >= fov[0] && p[0] <= fov[1] && p[1] >= fov[2] && p[1] <= fov[3];
        if !in_fov || miss_draw < sensor.miss_prob {
            continue;
        }
        let px = clamp_to_fov(p[0] + nx, fov[0], fov[1]);
        let py = clamp_to_fov(p[1] + ny, fov[2], fov[3]);
        let heading = crate::core::wrap_angle(agent.heading - mount_yaw + nh);
        let dist = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let confidence = (sensor.conf_base - sensor.conf_decay * dist).clamp(0.0, 1.0);
        let velocity = [agent.speed * heading.cos(), agent.speed * heading.sin()];
        queries.push(AgentQuery {
            feature: deterministic_embedding(
                agent.class,
                agent.box_size,
                heading,
                sensor.feature_dim,
            ),
            ref_point: [px, py, 0.0],
            heading,
            velocity,
            flow_ref: velocity,
            flow_feature: vec![0.0; sensor.feature_dim],
            track_id: sensor.track_id_base + agent.id,
            confidence,
            box_size: agent.box_size,
            class: agent.class,
            timestamp: frame.time,
        });
    }

    // Clutter: fresh negative ids, low confidence.
    let fp_count = if sensor.false_pos_rate > 0.0 {
        Poisson::new(sensor.false_pos_rate)
            .expect("rate > 0")
            .sample(rng) as usize
    } else {
        0
    };
    for j in 0..fp_count {
        let px = rng.gen_range(fov[0]..fov[1]);
        let py = rng.gen_range(fov[2]..fov[3]);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let confidence = rng.gen_range(0.05..0.4);
        let box_size = [4.0, 1.8, 1.5];
        let time_tag = (frame.time * 1000.0).round() as i32;
        queries.push(AgentQuery {
            feature: deterministic_embedding(
                AgentClass::Car,
                box_size,
                heading,
                sensor.feature_dim,
            ),
            ref_point: [px, py, 0.0],
            heading,
            velocity: [0.0, 0.0],
            flow_ref: [0.0, 0.0],
            flow_feature: vec![0.0; sensor.feature_dim],
            track_id: -(sensor.track_id_base + time_tag + j as i32 * 10_000_000),
            confidence,
            box_size,
            class: AgentClass::Car,
            timestamp: frame.time,
        });
    }

    let mut lane_queries = Vec::new();
    for lane in lanes {
        for piece in clip_polyline_to_fov(&lane.points, &to_sensor, fov) {
            lane_queries.push(LaneQuery {
                feature: lane_embedding(lane.class, sensor.feature_dim),
                points: piece,
                class: lane.class,
                confidence: 1.0,
            });
        }
    }

    // Occupancy: rasterize the (noisy) detections, then a soft 3x3 blur.
    let mut raster = Grid::filled(sensor.grid, false);
    for q in &queries {
        stamp_oriented_rect(
            &mut raster,
            [q.ref_point[0], q.ref_point[1]],
            q.heading,
            q.box_size[0],
            q.box_size[1],
        );
    }
    let p0 = blur_occupancy(&raster);
    let occupancy = OccupancyMessage {
        p1: Grid::filled(sensor.grid, 0.0),
        p0,
        timestamp: frame.time,
    };

    PerceivedFrame {
        agent_queries: queries,
        lane_queries,
        occupancy,
        timestamp: frame.time,
    }
}

/// 3x3 kernel with unit center and 0.25 ring, clamped to [0,1].
fn blur_occupancy(raster: &Grid<bool>) -> Grid<f32> {
    let spec = raster.spec;
    let mut out = Grid::filled(spec, 0.0f32);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let mut acc = 0.0f32;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || c < 0 || r >= spec.height as i64 || c >= spec.width as i64 {
                        continue;
                    }
                    if raster.get(r as usize, c as usize) {
                        acc += if dr == 0 && dc == 0 { 1.0 } else { 0.25 };
                    }
                }
            }
            out.set(row, col, acc.min(1.0));
        }
    }
    out
}
