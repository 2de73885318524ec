//! Rigid-body geometry, grid specifications, and the domain types shared by
//! every other module: poses, BEV grids, agent/lane queries, and occupancy
//! messages.
//!
//! Conventions used throughout the crate:
//! - Poses are `world_from_frame` maps: `R * x + T` takes frame coordinates
//!   into the parent frame.
//! - Grids are row-major; cell `(row, col)` covers
//!   `x in [x_min + col*res, x_min + (col+1)*res)` and likewise for `y` with
//!   `row`. Probabilities are cell-centered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality / determinant tolerance for pose validation.
pub const POSE_TOL: f64 = 1e-9;

/// Rigid transform: 3x3 rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Pose rotating about +z by `yaw` radians, then translating.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Validated constructor: rotation must be orthonormal with det +1
    /// within [`POSE_TOL`].
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Pose {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks R^T R = I and det R = +1 within [`POSE_TOL`].
    #[allow(clippy::needless_range_loop)]
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > POSE_TOL {
                    return Err(Error::Config(format!(
                        "rotation not orthonormal at ({i},{j}): {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > POSE_TOL {
            return Err(Error::Config(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// `self ∘ other`: maps `other`-frame coordinates into `self`'s parent
    /// frame. `R = Ra*Rb`, `T = Ra*Tb + Ta`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        let t = self.transform_point(other.translation);
        Pose {
            rotation: r,
            translation: t,
        }
    }

    /// Inverse transform: `R' = R^T`, `T' = -R^T * T`.
    pub fn invert(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation: nt,
        }
    }

    /// `R * x + T`.
    pub fn transform_point(&self, x: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + t[0],
            r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + t[1],
            r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + t[2],
        ]
    }

    /// Heading of the rotated +x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }
}

/// `invert(world_from_a) ∘ world_from_b`: maps b-frame coordinates into
/// a-frame coordinates.
pub fn relative_pose(world_from_a: &Pose, world_from_b: &Pose) -> Pose {
    world_from_a.invert().compose(world_from_b)
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(std::f64::consts::TAU);
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    x
}

/// BEV grid geometry: `width` columns by `height` rows of square cells,
/// cell (0,0) cornered at `(x_min, y_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub x_min: f64,
    pub y_min: f64,
}

impl GridSpec {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        x_min: f64,
        y_min: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || resolution <= 0.0 {
            return Err(Error::Config(format!(
                "grid spec must be positive: {width}x{height} @ {resolution}"
            )));
        }
        Ok(GridSpec {
            width,
            height,
            resolution,
            x_min,
            y_min,
        })
    }

    /// Default ego grid: 200x200 at 0.5 m/cell over [-50, 50]^2.
    pub fn ego_default() -> Self {
        GridSpec {
            width: 200,
            height: 200,
            resolution: 0.5,
            x_min: -50.0,
            y_min: -50.0,
        }
    }

    /// Default infrastructure grid: 200x200 at 0.5 m/cell over
    /// x in [0, 100], y in [-50, 50] (forward sensing range).
    pub fn infra_default() -> Self {
        GridSpec {
            width: 200,
            height: 200,
            resolution: 0.5,
            x_min: 0.0,
            y_min: -50.0,
        }
    }

    /// Covered extent in meters: (width*res, height*res).
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Maps a world-plane point to its (row, col) cell, or `None` outside
    /// the extent. `col = floor((x - x_min)/res)`, `row = floor((y - y_min)/res)`.
    pub fn world_to_cell(&self, xy: [f64; 2]) -> Option<(usize, usize)> {
        let cf = (xy[0] - self.x_min) / self.resolution;
        let rf = (xy[1] - self.y_min) / self.resolution;
        if cf < 0.0 || rf < 0.0 {
            return None;
        }
        let (col, row) = (cf.floor() as usize, rf.floor() as usize);
        if col >= self.width || row >= self.height {
            return None;
        }
        Some((row, col))
    }

    /// Center coordinates of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        ]
    }
}

/// Dense row-major grid of values over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub spec: GridSpec,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(spec: GridSpec, value: T) -> Self {
        Grid {
            data: vec![value; spec.cells()],
            spec,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.spec.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.spec.width + col] = value;
    }

    pub fn at_world(&self, xy: [f64; 2]) -> Option<T> {
        self.spec.world_to_cell(xy).map(|(r, c)| self.get(r, c))
    }
}

impl Grid<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

// Bool grids go into scenario JSON; pack rows as '0'/'1' strings to keep the
// files readable and compact.
impl Serialize for Grid<bool> {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut rows = Vec::with_capacity(self.spec.height);
        for r in 0..self.spec.height {
            let row: String = (0..self.spec.width)
                .map(|c| if self.get(r, c) { '1' } else { '0' })
                .collect();
            rows.push(row);
        }
        let mut s = serializer.serialize_struct("BoolGrid", 2)?;
        s.serialize_field("spec", &self.spec)?;
        s.serialize_field("rows", &rows)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for Grid<bool> {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            spec: GridSpec,
            rows: Vec<String>,
        }
        let raw = Raw::deserialize(deserializer)?;
        if raw.rows.len() != raw.spec.height {
            return Err(serde::de::Error::custom(
                "row count does not match grid spec",
            ));
        }
        let mut g = Grid::filled(raw.spec, false);
        for (r, row) in raw.rows.iter().enumerate() {
            if row.len() != raw.spec.width {
                return Err(serde::de::Error::custom(
                    "row length does not match grid spec",
                ));
            }
            for (c, ch) in row.chars().enumerate() {
                g.set(r, c, ch == '1');
            }
        }
        Ok(g)
    }
}

/// Object classes carried by agent queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Bicycle,
    Pedestrian,
    TrafficCone,
}

impl AgentClass {
    pub const ALL: [AgentClass; 4] = [
        AgentClass::Car,
        AgentClass::Bicycle,
        AgentClass::Pedestrian,
        AgentClass::TrafficCone,
    ];

    pub fn to_u8(self) -> u8 {
        match self {
            AgentClass::Car => 0,
            AgentClass::Bicycle => 1,
            AgentClass::Pedestrian => 2,
            AgentClass::TrafficCone => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(AgentClass::Car),
            1 => Some(AgentClass::Bicycle),
            2 => Some(AgentClass::Pedestrian),
            3 => Some(AgentClass::TrafficCone),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Car => "car",
            AgentClass::Bicycle => "bicycle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::TrafficCone => "traffic_cone",
        }
    }
}

/// Road element classes carried by lane queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneClass {
    Lane,
    Crosswalk,
}

impl LaneClass {
    pub const ALL: [LaneClass; 2] = [LaneClass::Lane, LaneClass::Crosswalk];

    pub fn to_u8(self) -> u8 {
        match self {
            LaneClass::Lane => 0,
            LaneClass::Crosswalk => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(LaneClass::Lane),
            1 => Some(LaneClass::Crosswalk),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LaneClass::Lane => "lane",
            LaneClass::Crosswalk => "crosswalk",
        }
    }
}

/// Instance-level record for one dynamic object: feature vector, reference
/// point, track id, and the flow fields used for latency compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentQuery {
    pub feature: Vec<f64>,
    /// Reference point in the owning frame, meters.
    pub ref_point: [f64; 3],
    pub heading: f64,
    pub velocity: [f64; 2],
    /// Reference-point flow, m/s.
    pub flow_ref: [f64; 2],
    /// Feature flow, units of feature per second.
    pub flow_feature: Vec<f64>,
    pub track_id: i32,
    pub confidence: f64,
    /// (length, width, height), meters.
    pub box_size: [f64; 3],
    pub class: AgentClass,
    pub timestamp: f64,
}

/// Instance-level record for one road element polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneQuery {
    pub feature: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub class: LaneClass,
    pub confidence: f64,
}

/// Scene-level occupancy record: present probability map plus its linear
/// flow, enabling `p0 + dt * p1` extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMessage {
    pub p0: Grid<f32>,
    pub p1: Grid<f32>,
    pub timestamp: f64,
}

impl OccupancyMessage {
    pub fn new(p0: Grid<f32>, p1: Grid<f32>, timestamp: f64) -> Result<Self> {
        if p0.spec != p1.spec {
            return Err(Error::Dimension(
                "occupancy p0/p1 grids must share a spec".into(),
            ));
        }
        Ok(OccupancyMessage { p0, p1, timestamp })
    }

    pub fn zeros(spec: GridSpec, timestamp: f64) -> Self {
        OccupancyMessage {
            p0: Grid::filled(spec, 0.0),
            p1: Grid::filled(spec, 0.0),
            timestamp,
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.p0.spec
    }
}

/// Thresholded occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupiedMask {
    pub cells: Grid<bool>,
    pub threshold_used: f32,
}

/// Cells of `spec` whose centers lie inside the oriented rectangle of size
/// `length` x `width` centered at `center` with the given heading. Scans only
/// the rectangle's bounding box.
pub fn cells_in_oriented_rect(
    spec: &GridSpec,
    center: [f64; 2],
    heading: f64,
    length: f64,
    width: f64,
) -> Vec<(usize, usize)> {
    let (s, c) = heading.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    // Bounding radius of the rectangle.
    let rad = hl.abs().hypot(hw.abs());
    let lo_x = ((center[0] - rad - spec.x_min) / spec.resolution)
        .floor()
        .max(0.0) as usize;
    let lo_y = ((center[1] - rad - spec.y_min) / spec.resolution)
        .floor()
        .max(0.0) as usize;
    let hi_x = (((center[0] + rad - spec.x_min) / spec.resolution).ceil() as i64)
        .clamp(0, spec.width as i64) as usize;
    let hi_y = (((center[1] + rad - spec.y_min) / spec.resolution).ceil() as i64)
        .clamp(0, spec.height as i64) as usize;
    let mut out = Vec::new();
    for row in lo_y..hi_y {
        for col in lo_x..hi_x {
            let p = spec.cell_center(row, col);
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            // Into box frame.
            let bx = c * dx + s * dy;
            let by = -s * dx + c * dy;
            if bx.abs() <= hl && by.abs() <= hw {
                out.push((row, col));
            }
        }
    }
    out
}

/// Marks all cells covered by the oriented rectangle as true.
pub fn stamp_oriented_rect(
    grid: &mut Grid<bool>,
    center: [f64; 2],
    heading: f64,
    length: f64,
    width: f64,
) {
    for (r, c) in cells_in_oriented_rect(&grid.spec, center, heading, length, width) {
        grid.set(r, c, true);
    }
}

/// True when any `true` cell of the mask has its center inside the rectangle.
pub fn rect_overlaps_mask(
    mask: &Grid<bool>,
    center: [f64; 2],
    heading: f64,
    length: f64,
    width: f64,
) -> bool {
    cells_in_oriented_rect(&mask.spec, center, heading, length, width)
        .into_iter()
        .any(|(r, c)| mask.get(r, c))
}
