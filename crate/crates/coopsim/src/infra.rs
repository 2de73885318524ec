//! Infrastructure-side construction of the sparse-dense hybrid transmission
//! payload: confidence filtering, two-frame flow estimation for queries and
//! the occupancy map, and payload assembly.

use std::collections::HashMap;

use crate::core::{AgentQuery, Grid, GridSpec, LaneQuery, OccupancyMessage, Pose};
use crate::error::{Error, Result};
use crate::scenario::PerceivedFrame;

/// Transmission header: who sent at what time, and the sender's mounting
/// pose so the receiver can compute the relative transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadHeader {
    pub sender_id: u32,
    pub timestamp: f64,
    pub world_from_sensor: Pose,
}

/// Occupancy as it travels: either the full dense (p0, p1) pair or, after
/// budget degradation, a ranked sparse cell list.
#[derive(Debug, Clone, PartialEq)]
pub enum OccupancyTransport {
    Dense(OccupancyMessage),
    Sparse {
        grid: GridSpec,
        timestamp: f64,
        /// (row-major cell index, p0, p1), ranked by descending p0.
        cells: Vec<(u32, f32, f32)>,
    },
}

impl OccupancyTransport {
    pub fn grid(&self) -> GridSpec {
        match self {
            OccupancyTransport::Dense(m) => m.grid(),
            OccupancyTransport::Sparse { grid, .. } => *grid,
        }
    }

    pub fn timestamp(&self) -> f64 {
        match self {
            OccupancyTransport::Dense(m) => m.timestamp,
            OccupancyTransport::Sparse { timestamp, .. } => *timestamp,
        }
    }

    /// Densifies into an [`OccupancyMessage`] (sparse cells land on zeros).
    pub fn to_message(&self) -> OccupancyMessage {
        match self {
            OccupancyTransport::Dense(m) => m.clone(),
            OccupancyTransport::Sparse {
                grid,
                timestamp,
                cells,
            } => {
                let mut p0 = Grid::filled(*grid, 0.0f32);
                let mut p1 = Grid::filled(*grid, 0.0f32);
                for &(idx, v0, v1) in cells {
                    let idx = idx as usize;
                    if idx < p0.data.len() {
                        p0.data[idx] = v0;
                        p1.data[idx] = v1;
                    }
                }
                OccupancyMessage {
                    p0,
                    p1,
                    timestamp: *timestamp,
                }
            }
        }
    }
}

/// One V2X transmission: header plus the sparse (queries) and dense
/// (occupancy) halves of the hybrid payload.
#[derive(Debug, Clone, PartialEq)]
pub struct V2XPayload {
    pub header: PayloadHeader,
    pub agent_queries: Vec<AgentQuery>,
    pub lane_queries: Vec<LaneQuery>,
    pub occupancy: Option<OccupancyTransport>,
}

impl V2XPayload {
    pub fn empty(header: PayloadHeader) -> Self {
        V2XPayload {
            header,
            agent_queries: Vec::new(),
            lane_queries: Vec::new(),
            occupancy: None,
        }
    }
}

/// Keeps exactly the queries with confidence >= threshold, order preserved.
pub fn filter_queries(queries: &[AgentQuery], conf_threshold: f64) -> Vec<AgentQuery> {
    queries
        .iter()
        .filter(|q| q.confidence >= conf_threshold)
        .cloned()
        .collect()
}

fn filter_lanes(queries: &[LaneQuery], conf_threshold: f64) -> Vec<LaneQuery> {
    queries
        .iter()
        .filter(|q| q.confidence >= conf_threshold)
        .cloned()
        .collect()
}

/// Two-frame finite-difference query flow. Queries whose track id appears in
/// `prev` get `(curr - prev)/dt` flows; new tracks fall back to
/// `flow_ref = velocity`, `flow_feature = 0`.
pub fn estimate_query_flow(
    prev: Option<&PerceivedFrame>,
    curr: &PerceivedFrame,
    dt: f64,
) -> Result<PerceivedFrame> {
    if dt <= 0.0 {
        return Err(Error::TimeOrder("flow estimation needs dt > 0".into()));
    }
    let prev_by_id: HashMap<i32, &AgentQuery> = prev
        .map(|f| f.agent_queries.iter().map(|q| (q.track_id, q)).collect())
        .unwrap_or_default();
    let mut out = curr.clone();
    for q in &mut out.agent_queries {
        match prev_by_id.get(&q.track_id) {
            Some(p) => {
                q.flow_ref = [
                    (q.ref_point[0] - p.ref_point[0]) / dt,
                    (q.ref_point[1] - p.ref_point[1]) / dt,
                ];
                q.flow_feature = q
                    .feature
                    .iter()
                    .zip(p.feature.iter())
                    .map(|(c, pv)| (c - pv) / dt)
                    .collect();
            }
            None => {
                q.flow_ref = q.velocity;
                q.flow_feature = vec![0.0; q.feature.len()];
            }
        }
    }
    let p1 = match prev {
        Some(p) => estimate_occupancy_flow(&p.occupancy.p0, &curr.occupancy.p0, dt)?,
        None => Grid::filled(curr.occupancy.grid(), 0.0),
    };
    out.occupancy.p1 = p1;
    Ok(out)
}

/// Per-cell finite difference `(p_curr - p_prev) / dt`.
pub fn estimate_occupancy_flow(
    p_prev: &Grid<f32>,
    p_curr: &Grid<f32>,
    dt: f64,
) -> Result<Grid<f32>> {
    if dt <= 0.0 {
        return Err(Error::TimeOrder("occupancy flow needs dt > 0".into()));
    }
    if p_prev.spec != p_curr.spec {
        return Err(Error::Dimension(
            "occupancy flow inputs must share a grid spec".into(),
        ));
    }
    let mut p1 = Grid::filled(p_curr.spec, 0.0f32);
    for (i, v) in p1.data.iter_mut().enumerate() {
        *v = ((p_curr.data[i] as f64 - p_prev.data[i] as f64) / dt) as f32;
    }
    Ok(p1)
}

/// Which parts of the hybrid payload are transmitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransmitContent {
    pub agents: bool,
    pub lanes: bool,
    pub occupancy: bool,
}

impl Default for TransmitContent {
    fn default() -> Self {
        TransmitContent {
            agents: true,
            lanes: true,
            occupancy: true,
        }
    }
}

/// Assembles the transmission payload from a perceived frame with estimated
/// flows: confidence-filtered agent and lane queries plus the dense (p0, p1)
/// occupancy message.
pub fn build_payload(
    frame: &PerceivedFrame,
    sensor_pose: &Pose,
    sender_id: u32,
    conf_threshold: f64,
    content: TransmitContent,
) -> V2XPayload {
    let header = PayloadHeader {
        sender_id,
        timestamp: frame.timestamp,
        world_from_sensor: *sensor_pose,
    };
    V2XPayload {
        header,
        agent_queries: if content.agents {
            filter_queries(&frame.agent_queries, conf_threshold)
        } else {
            Vec::new()
        },
        lane_queries: if content.lanes {
            filter_lanes(&frame.lane_queries, conf_threshold)
        } else {
            Vec::new()
        },
        occupancy: if content.occupancy {
            Some(OccupancyTransport::Dense(frame.occupancy.clone()))
        } else {
            None
        },
    }
}
